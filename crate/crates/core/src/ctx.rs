//! Per-forward state: mode, random streams and mask anchoring.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Controls how hard masks are formed.
///
/// `Record` behaves like `Live` and stores every `(hard mask, pre-threshold
/// map)` pair. `Replay` reuses the stored hard masks and adds the map's
/// displacement from its recorded value, giving a smooth surrogate whose
/// derivative at the recorded point is the straight-through gradient. This is
/// what finite-difference checks differentiate.
#[derive(Debug, Clone, Default)]
pub enum MaskPolicy {
    #[default]
    Live,
    Record(Arc<MaskTape>),
    Replay(Arc<MaskTape>),
}

#[derive(Debug, Default)]
pub struct MaskTape {
    entries: Mutex<Vec<(Tensor, Tensor)>>,
    cursor: AtomicUsize,
}

impl MaskTape {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("mask tape").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Restarts replay from the first recorded mask.
    pub fn rewind(&self) {
        self.cursor.store(0, Ordering::SeqCst);
    }

    fn push(&self, hard: Tensor, d: Tensor) {
        self.entries.lock().expect("mask tape").push((hard, d));
    }

    fn next(&self) -> Result<(Tensor, Tensor)> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        self.entries
            .lock()
            .expect("mask tape")
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Shape(format!("mask tape exhausted at entry {i}")))
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub seed: u64,
    pub step: u64,
    pub masks: MaskPolicy,
}

impl ForwardCtx {
    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            mode: Mode::Train,
            seed,
            step,
            masks: MaskPolicy::Live,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            seed: 0,
            step: 0,
            masks: MaskPolicy::Live,
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn dropout_stream(&self, module: &str) -> ChaCha8Rng {
        rng::stream(self.seed, &[tag::DROPOUT, self.step, rng::string_key(module)])
    }

    /// Dropout that is active only in training mode.
    pub fn dropout(&self, x: &Tensor, rate: f64, module: &str) -> Result<Tensor> {
        if !self.is_train() || rate <= 0.0 {
            return Ok(x.clone());
        }
        nn::dropout(x, rate, &mut self.dropout_stream(module))
    }

    /// Straight-through mask from a pre-threshold map `d` and its hard 0/1
    /// value `hard(d)`: forward equals the hard mask, backward is identity on
    /// `d`.
    pub fn straight_through(&self, d: &Tensor, hard: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        match &self.masks {
            MaskPolicy::Live => {
                let h = hard(&d.detach())?;
                Ok((h + (d - d.detach())?)?)
            }
            MaskPolicy::Record(tape) => {
                let h = hard(&d.detach())?;
                tape.push(h.clone(), d.detach());
                Ok((h + (d - d.detach())?)?)
            }
            MaskPolicy::Replay(tape) => {
                let (h, d0) = tape.next()?;
                if h.dims() != d.dims() {
                    return Err(Error::Shape("replayed mask does not match the map shape".into()));
                }
                Ok((h + (d - d0)?)?)
            }
        }
    }
}
