use crate::numkernel::{softplus, softplus_inv, RngStream, Tensor1, Tensor2};
use crate::{Error, Result};

/// Whether weights are distributions or point estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Bayesian,
    /// σ is treated as exactly 0 and every ρ is ignored.
    Deterministic,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Bayesian => "bayesian",
            Mode::Deterministic => "deterministic",
        }
    }
}

/// Variational parameters of one dense layer. σ = softplus(ρ).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub mu_w: Tensor2,
    pub rho_w: Tensor2,
    pub mu_b: Tensor1,
    pub rho_b: Tensor1,
}

impl VariationalLayer {
    pub fn new(mu_w: Tensor2, rho_w: Tensor2, mu_b: Tensor1, rho_b: Tensor1) -> Result<Self> {
        if mu_w.shape() != rho_w.shape() || mu_b.len() != rho_b.len() || mu_b.len() != mu_w.rows() {
            return Err(Error::dim(
                format!("muW{:?} rhoW{:?}", mu_w.shape(), rho_w.shape()),
                format!("mub({}) rhob({})", mu_b.len(), rho_b.len()),
            ));
        }
        Ok(Self {
            mu_w,
            rho_w,
            mu_b,
            rho_b,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            mu_w: Tensor2::zeros(outputs, inputs),
            rho_w: Tensor2::zeros(outputs, inputs),
            mu_b: Tensor1::zeros(outputs),
            rho_b: Tensor1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.mu_w.cols()
    }

    pub fn outputs(&self) -> usize {
        self.mu_w.rows()
    }

    pub fn num_weights(&self) -> usize {
        self.mu_w.as_slice().len() + self.mu_b.len()
    }

    /// The four tensors in serialization order: muW, rhoW, mub, rhob.
    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.mu_w.as_slice(),
            self.rho_w.as_slice(),
            self.mu_b.as_slice(),
            self.rho_b.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.mu_w.as_mut_slice(),
            self.rho_w.as_mut_slice(),
            self.mu_b.as_mut_slice(),
            self.rho_b.as_mut_slice(),
        ]
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.mu_w.shape() == other.mu_w.shape() && self.mu_b.len() == other.mu_b.len()
    }
}

/// Diagonal Gaussian prior shared by every weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prior {
    pub mu0: f64,
    pub sigma0: f64,
}

impl Prior {
    pub fn new(mu0: f64, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0) || !sigma0.is_finite() || !mu0.is_finite() {
            return Err(Error::Argument(format!(
                "prior needs finite mu0 and sigma0 > 0, got ({mu0}, {sigma0})"
            )));
        }
        Ok(Self { mu0, sigma0 })
    }
}

impl Default for Prior {
    fn default() -> Self {
        Self { mu0: 0.0, sigma0: 1.0 }
    }
}

/// Initial σ for every weight of a freshly built network.
pub const INIT_SIGMA: f64 = 0.05;

/// Mean-field Gaussian MLP: ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    layers: Vec<VariationalLayer>,
    mode: Mode,
}

impl VariationalNet {
    pub fn from_layers(layers: Vec<VariationalLayer>, mode: Mode) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dim(
                    format!("layer out {}", pair[0].outputs()),
                    format!("next layer in {}", pair[1].inputs()),
                ));
            }
        }
        Ok(Self { layers, mode })
    }

    /// Build `sizes[0] → sizes[1] → … → sizes[last]`.
    ///
    /// μ ~ U(±1/√fan_in), ρ = softplus⁻¹(σ_init).
    pub fn init(sizes: &[usize], mode: Mode, init_sigma: f64, rng: &mut RngStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Argument(format!("bad layer sizes {sizes:?}")));
        }
        let rho0 = softplus_inv(init_sigma)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = VariationalLayer::zeros(fan_in, fan_out);
                for v in layer.mu_w.as_mut_slice() {
                    *v = (2.0 * rng.uniform() - 1.0) * bound;
                }
                for v in layer.mu_b.as_mut_slice() {
                    *v = (2.0 * rng.uniform() - 1.0) * bound;
                }
                layer.rho_w = Tensor2::filled(fan_out, fan_in, rho0);
                layer.rho_b = Tensor1::from(vec![rho0; fan_out]);
                layer
            })
            .collect();
        Self::from_layers(layers, mode)
    }

    pub fn layers(&self) -> &[VariationalLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [VariationalLayer] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// `[in, hidden…, out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs()));
        s
    }

    /// Number of weights and biases (each carries a μ and a ρ).
    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.num_weights()).sum()
    }

    /// Total stored scalars, μ and ρ together.
    pub fn num_params(&self) -> usize {
        2 * self.num_weights()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len() && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    /// All stored parameters, per layer in muW, rhoW, mub, rhob order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            for s in l.slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim(
                format!("{} parameters", self.num_params()),
                format!("{} values", flat.len()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for s in l.slices_mut() {
                s.copy_from_slice(&flat[off..off + s.len()]);
                off += s.len();
            }
        }
        Ok(())
    }

    /// σ for every weight in layer order (W then b).
    pub fn sigmas(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_weights());
        for l in &self.layers {
            out.extend(l.rho_w.as_slice().iter().map(|&r| softplus(r)));
            out.extend(l.rho_b.as_slice().iter().map(|&r| softplus(r)));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.slices().iter().all(|s| s.iter().all(|v| v.is_finite())))
    }

    /// Set every ρ to the same value.
    pub fn fill_rho(&mut self, rho: f64) {
        for l in &mut self.layers {
            l.rho_w.as_mut_slice().fill(rho);
            l.rho_b.as_mut_slice().fill(rho);
        }
    }
}
