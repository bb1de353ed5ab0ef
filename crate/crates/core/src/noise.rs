//! Counter-based Brownian increments.
//!
//! Every increment is addressed by `(run, step, node)`, where `node` indexes a
//! binary tree of Brownian-bridge refinements below the base step (node 1 is
//! the whole step, nodes `2m` and `2m+1` split node `m`, and node 0 draws
//! the step itself). Two consumers with the same seed therefore see the same
//! path regardless of how finely they subdivide it.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Largest supported node index (bits reserved in the stream id).
const NODE_BITS: u32 = 24;
/// Deepest refinement below a base step.
pub const MAX_DEPTH: u32 = NODE_BITS - 1;

#[derive(Debug, Clone)]
pub struct Noise {
    seed: u64,
    dim: usize,
    shared: Option<(u64, usize)>,
}

impl Noise {
    pub fn new(seed: u64, dim: usize) -> Self {
        Noise { seed, dim, shared: None }
    }

    /// Runs use the noise of `run` for their first `steps` base steps.
    pub fn with_shared_prefix(mut self, run: u64, steps: usize) -> Self {
        self.shared = Some((run, steps));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn normals(&self, run: u64, step: usize, node: u64) -> DVector<f64> {
        debug_assert!(node < 1 << NODE_BITS);
        let run = match self.shared {
            Some((r, steps)) if step < steps => r,
            _ => run,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((run << NODE_BITS) | node);
        rng.set_word_pos((step as u128) << 10);
        DVector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Increment over base step `step` of width `h`.
    pub fn increment(&self, run: u64, step: usize, h: f64) -> DVector<f64> {
        self.normals(run, step, 0) * h.sqrt()
    }

    /// Split the increment `parent` over an interval of width `h` at `node`
    /// into its two halves.
    pub fn split(&self, run: u64, step: usize, node: u64, parent: &DVector<f64>, h: f64) -> (DVector<f64>, DVector<f64>) {
        let left = parent * 0.5 + self.normals(run, step, node) * (0.5 * h.sqrt());
        let right = parent - &left;
        (left, right)
    }

    /// The `2^levels` sub-increments of base step `step`, with their node ids.
    pub fn refined(&self, run: u64, step: usize, h: f64, levels: u32) -> Vec<(u64, DVector<f64>)> {
        assert!(levels <= MAX_DEPTH, "refinement depth {levels} exceeds {MAX_DEPTH}");
        let mut cur = vec![(1u64, self.increment(run, step, h))];
        let mut width = h;
        for _ in 0..levels {
            let mut next = Vec::with_capacity(cur.len() * 2);
            for (node, inc) in &cur {
                let (l, r) = self.split(run, step, *node, inc, width);
                next.push((2 * node, l));
                next.push((2 * node + 1, r));
            }
            cur = next;
            width *= 0.5;
        }
        cur
    }
}
