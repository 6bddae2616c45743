use crate::Scalar;

/// Exponential moving average over minibatch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ema<T> {
    value: T,
    decay: T,
    initialized: bool,
}

impl<T: Scalar> Ema<T> {
    pub fn new(decay: T) -> Self {
        assert!(decay > T::zero() && decay < T::one(), "EMA decay must lie in (0, 1)");
        Self {
            value: T::zero(),
            decay,
            initialized: false,
        }
    }

    /// First call stores the mean; later calls blend `decay·value + (1-decay)·mean`.
    pub fn update(&mut self, minibatch_mean: T) {
        if self.initialized {
            self.value = self.decay * self.value + (T::one() - self.decay) * minibatch_mean;
        } else {
            self.value = minibatch_mean;
            self.initialized = true;
        }
    }

    pub fn get(&self) -> Option<T> {
        self.initialized.then_some(self.value)
    }

    pub fn get_or(&self, fallback: T) -> T {
        self.get().unwrap_or(fallback)
    }

    pub fn decay(&self) -> T {
        self.decay
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

pub fn ema_update<T: Scalar>(state: &mut Ema<T>, minibatch_mean: T) {
    state.update(minibatch_mean);
}

/// Trailing expectations of the three quantities a rescaling can regularize, for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRegEma<T> {
    /// `E[F_norm²]`
    pub f_norm_sq: Ema<T>,
    /// `E[‖grad‖²]`
    pub grad_norm_sq: Ema<T>,
    /// `E[(F_norm / ‖grad‖)²]`
    pub rel_norm_sq: Ema<T>,
}

impl<T: Scalar> LayerRegEma<T> {
    fn new(decay: T) -> Self {
        Self {
            f_norm_sq: Ema::new(decay),
            grad_norm_sq: Ema::new(decay),
            rel_norm_sq: Ema::new(decay),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegEmaState<T> {
    decay: T,
    layers: Vec<LayerRegEma<T>>,
}

impl<T: Scalar> RegEmaState<T> {
    pub fn new(decay: T) -> Self {
        assert!(decay > T::zero() && decay < T::one(), "EMA decay must lie in (0, 1)");
        Self {
            decay,
            layers: Vec::new(),
        }
    }

    pub fn decay(&self) -> T {
        self.decay
    }

    pub fn layer(&self, l: usize) -> Option<&LayerRegEma<T>> {
        self.layers.get(l)
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerRegEma<T> {
        while self.layers.len() <= l {
            self.layers.push(LayerRegEma::new(self.decay));
        }
        &mut self.layers[l]
    }
}
