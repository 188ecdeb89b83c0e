//! Layers, recurrent cells and the optimizer used by every model.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::graph::{Graph, ParamId, ParamSet, Tensor, Var};

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Fully connected layer `x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            init_uniform(rng, in_dim, out_dim, in_dim),
        );
        let bias = Some(ps.add(
            format!("{name}.bias"),
            init_uniform(rng, 1, out_dim, in_dim),
        ));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            init_uniform(rng, in_dim, out_dim, in_dim),
        );
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

/// Hidden (and, for LSTMs, cell) state of a recurrent layer.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Option<Var>,
}

/// Gated recurrent unit:
/// `r = σ(x·Wxr + h·Whr + br)`, `u = σ(x·Wxu + h·Whu + bu)`,
/// `n = tanh(x·Wxn + (r⊙h)·Whn + bn)`, `h' = u⊙h + (1-u)⊙n`.
#[derive(Debug, Clone)]
pub struct GruCell {
    wx: ParamId,
    wh_gates: ParamId,
    wh_cand: ParamId,
    bias: ParamId,
    input: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            wx: ps.add(
                format!("{name}.wx"),
                init_uniform(rng, input, 3 * hidden, hidden),
            ),
            wh_gates: ps.add(
                format!("{name}.wh_gates"),
                init_uniform(rng, hidden, 2 * hidden, hidden),
            ),
            wh_cand: ps.add(
                format!("{name}.wh_cand"),
                init_uniform(rng, hidden, hidden, hidden),
            ),
            bias: ps.add(
                format!("{name}.bias"),
                init_uniform(rng, 1, 3 * hidden, hidden),
            ),
            input,
            hidden,
        }
    }

    fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let hs = self.hidden;
        let (wx, whg, whc, b) = (
            g.param(self.wx),
            g.param(self.wh_gates),
            g.param(self.wh_cand),
            g.param(self.bias),
        );
        let gx = g.affine(x, wx, b);
        let gh = g.matmul(h, whg);
        let gx_rz = g.slice_cols(gx, 0, 2 * hs);
        let pre = g.add(gx_rz, gh);
        let gates = g.sigmoid(pre);
        let r = g.slice_cols(gates, 0, hs);
        let u = g.slice_cols(gates, hs, hs);
        let rh = g.mul(r, h);
        let cand_h = g.matmul(rh, whc);
        let gx_n = g.slice_cols(gx, 2 * hs, hs);
        let cand_pre = g.add(gx_n, cand_h);
        let n = g.tanh(cand_pre);
        // h' = n + u ⊙ (h - n)
        let diff = g.sub(h, n);
        let keep = g.mul(u, diff);
        g.add(n, keep)
    }
}

/// Long short-term memory cell with forget-gate bias initialized to 1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
    input: usize,
    hidden: usize,
}

impl LstmCell {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut bias = init_uniform(rng, 1, 4 * hidden, hidden);
        bias.slice_mut(ndarray::s![.., 0..hidden]).fill(1.0);
        Self {
            wx: ps.add(
                format!("{name}.wx"),
                init_uniform(rng, input, 4 * hidden, hidden),
            ),
            wh: ps.add(
                format!("{name}.wh"),
                init_uniform(rng, hidden, 4 * hidden, hidden),
            ),
            bias: ps.add(format!("{name}.bias"), bias),
            input,
            hidden,
        }
    }

    fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hs = self.hidden;
        let (wx, wh, b) = (g.param(self.wx), g.param(self.wh), g.param(self.bias));
        let gx = g.affine(x, wx, b);
        let gh = g.matmul(h, wh);
        let pre = g.add(gx, gh);
        let sig_pre = g.slice_cols(pre, 0, 3 * hs);
        let sig = g.sigmoid(sig_pre);
        let f = g.slice_cols(sig, 0, hs);
        let i = g.slice_cols(sig, hs, hs);
        let o = g.slice_cols(sig, 2 * hs, hs);
        let cand_pre = g.slice_cols(pre, 3 * hs, hs);
        let cand = g.tanh(cand_pre);
        let fc = g.mul(f, c);
        let ig = g.mul(i, cand);
        let c_new = g.add(fc, ig);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        (h_new, c_new)
    }
}

/// Either recurrent cell behind one interface.
#[derive(Debug, Clone)]
pub enum Cell {
    Gru(GruCell),
    Lstm(LstmCell),
}

impl Cell {
    pub fn new(
        kind: CellKind,
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            CellKind::Gru => Cell::Gru(GruCell::new(ps, name, input, hidden, rng)),
            CellKind::Lstm => Cell::Lstm(LstmCell::new(ps, name, input, hidden, rng)),
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            Cell::Gru(c) => c.hidden,
            Cell::Lstm(c) => c.hidden,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Cell::Gru(c) => c.input,
            Cell::Lstm(c) => c.input,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> RecurrentState {
        let h = g.constant(Tensor::zeros((batch, self.hidden_size())));
        self.state_from_hidden(g, h)
    }

    /// State whose hidden part is `h`; LSTM cell memory starts at zero.
    pub fn state_from_hidden(&self, g: &mut Graph, h: Var) -> RecurrentState {
        match self {
            Cell::Gru(_) => RecurrentState { h, c: None },
            Cell::Lstm(c) => {
                let rows = g.shape(h).0;
                let mem = g.constant(Tensor::zeros((rows, c.hidden)));
                RecurrentState { h, c: Some(mem) }
            }
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: RecurrentState) -> RecurrentState {
        match self {
            Cell::Gru(cell) => RecurrentState {
                h: cell.step(g, x, state.h),
                c: None,
            },
            Cell::Lstm(cell) => {
                let c = state.c.expect("LSTM state without cell memory");
                let (h, c) = cell.step(g, x, state.h, c);
                RecurrentState { h, c: Some(c) }
            }
        }
    }
}

/// Global-norm gradient clipping; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.raw_dim()))
            .collect::<Vec<_>>();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((id, g), (m, v)) in params
            .ids()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}
