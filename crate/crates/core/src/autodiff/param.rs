use crate::quantization::Pow2Grid;
use crate::tensor::Tensor;

/// Trainable tensor with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    id: usize,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: usize, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { id, value, grad }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Per-weight quantization state. Transitions only leave `Free`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantState {
    Free,
    /// Value is `±2^exponent`.
    Quantized(i32),
    /// Snapped to zero; the gate stays open.
    QuantizedZero,
}

impl QuantState {
    pub fn is_frozen(self) -> bool {
        !matches!(self, QuantState::Free)
    }
}

/// Weight tensor with a binary gate per entry and a quantization state.
///
/// Gates can only be closed: there is no way to reopen one, so a pruned
/// weight never rejoins the network. The effective weight is
/// `value ⊙ gate`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedParameter {
    pub base: Parameter,
    gate: Vec<bool>,
    quant: Vec<QuantState>,
    grid: Option<Pow2Grid>,
}

impl MaskedParameter {
    pub fn new(base: Parameter) -> Self {
        let n = base.value.len();
        Self {
            base,
            gate: vec![true; n],
            quant: vec![QuantState::Free; n],
            grid: None,
        }
    }

    pub fn len(&self) -> usize {
        self.gate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gate.is_empty()
    }

    pub fn gate(&self) -> &[bool] {
        &self.gate
    }

    pub fn is_on(&self, i: usize) -> bool {
        self.gate[i]
    }

    /// Closes gate `i`. Returns true if it was open.
    pub fn prune(&mut self, i: usize) -> bool {
        std::mem::replace(&mut self.gate[i], false)
    }

    pub fn quant_state(&self) -> &[QuantState] {
        &self.quant
    }

    pub fn grid(&self) -> Option<&Pow2Grid> {
        self.grid.as_ref()
    }

    pub(crate) fn set_grid(&mut self, grid: Pow2Grid) {
        self.grid = Some(grid);
    }

    /// Freezes weight `i` at `value` with the given state. Frozen weights
    /// are never re-frozen.
    pub(crate) fn freeze(&mut self, i: usize, value: f64, state: QuantState) {
        debug_assert!(state.is_frozen());
        if self.quant[i].is_frozen() {
            return;
        }
        self.base.value.data_mut()[i] = value;
        self.quant[i] = state;
    }

    /// `value ⊙ gate`.
    pub fn effective(&self) -> Vec<f64> {
        self.base
            .value
            .data()
            .iter()
            .zip(&self.gate)
            .map(|(&v, &g)| if g { v } else { 0.0 })
            .collect()
    }

    pub fn effective_at(&self, i: usize) -> f64 {
        if self.gate[i] {
            self.base.value.data()[i]
        } else {
            0.0
        }
    }

    pub fn zero_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.effective_at(i) == 0.0).count()
    }

    pub fn gated_on_count(&self) -> usize {
        self.gate.iter().filter(|&&g| g).count()
    }

    /// Gated-on weights that have been quantized (including to zero).
    pub fn quantized_on_count(&self) -> usize {
        self.gate
            .iter()
            .zip(&self.quant)
            .filter(|(&g, q)| g && q.is_frozen())
            .count()
    }

    /// True when every gated-on weight is frozen.
    pub fn is_fully_quantized(&self) -> bool {
        self.gate
            .iter()
            .zip(&self.quant)
            .all(|(&g, q)| !g || q.is_frozen())
    }

    /// Zeroes the gradient wherever the gate is closed or the weight is frozen.
    pub fn mask_grad(&mut self, gates: bool, frozen: bool) {
        let grad = self.base.grad.data_mut();
        for ((g, &on), q) in grad.iter_mut().zip(&self.gate).zip(&self.quant) {
            if (gates && !on) || (frozen && q.is_frozen()) {
                *g = 0.0;
            }
        }
    }

    /// Rebuilds a parameter from stored effective weights: zeros get a
    /// closed gate and the rest open.
    pub(crate) fn from_effective(id: usize, value: Tensor) -> Self {
        let gate = value.data().iter().map(|&v| v != 0.0).collect();
        let n = value.len();
        Self {
            base: Parameter::new(id, value),
            gate,
            quant: vec![QuantState::Free; n],
            grid: None,
        }
    }

    pub(crate) fn from_parts(
        base: Parameter,
        gate: Vec<bool>,
        quant: Vec<QuantState>,
        grid: Option<Pow2Grid>,
    ) -> Self {
        Self {
            base,
            gate,
            quant,
            grid,
        }
    }
}
