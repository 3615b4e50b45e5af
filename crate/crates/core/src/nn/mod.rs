//! Minimal dense neural-network toolkit: tensors, reverse-mode autodiff,
//! fused attention kernels, and the Adam optimizer.

pub mod adam;
pub mod attention;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use attention::SeqLayout;
pub use graph::{Graph, Var};
pub use params::ParamSet;
pub use tensor::Tensor;

use rand::Rng;

/// Inverted-dropout mask: entries are `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Source of dropout masks for one forward pass.
///
/// `Train` draws an independent mask per row. `Realization` draws one mask
/// row per layer from a seeded stream and shares it across the batch, so
/// every row sees the same thinned network and a batch split into chunks
/// sees the same network in every chunk (rebuild with the same seed).
pub enum Dropout<'a> {
    Off,
    Train { rate: f64, rng: &'a mut crate::rng::Rng },
    Realization { rate: f64, seed: u64, calls: u64 },
}

impl<'a> Dropout<'a> {
    pub fn train(rate: f64, rng: &'a mut crate::rng::Rng) -> Self {
        Dropout::Train { rate, rng }
    }

    pub fn realization(rate: f64, seed: u64) -> Self {
        Dropout::Realization { rate, seed, calls: 0 }
    }

    pub fn is_active(&self) -> bool {
        match self {
            Dropout::Off => false,
            Dropout::Train { rate, .. } | Dropout::Realization { rate, .. } => *rate > 0.0,
        }
    }

    /// Mask for an activation of `rows × cols`, or `None` when inactive.
    pub fn mask(&mut self, rows: usize, cols: usize) -> Option<std::rc::Rc<Tensor>> {
        match self {
            Dropout::Off => None,
            Dropout::Train { rate, rng } => {
                (*rate > 0.0).then(|| std::rc::Rc::new(dropout_mask(rows, cols, *rate, *rng)))
            }
            Dropout::Realization { rate, seed, calls } => {
                if *rate <= 0.0 {
                    return None;
                }
                let mut rng = crate::rng::stream(*seed, "dropout", *calls);
                *calls += 1;
                let row = dropout_mask(1, cols, *rate, &mut rng);
                let mut t = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    t.row_mut(r).copy_from_slice(&row.data);
                }
                Some(std::rc::Rc::new(t))
            }
        }
    }
}

/// Applies an optional dropout mask.
pub fn apply_dropout(g: &mut Graph, x: Var, mask: Option<std::rc::Rc<Tensor>>) -> Var {
    match mask {
        Some(m) => g.mul_const(x, m),
        None => x,
    }
}
