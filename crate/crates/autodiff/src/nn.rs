//! Parameter binding and the layers the forecasting models are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::Deref;

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A tape bound to a parameter store. Each parameter is copied onto the
/// tape the first time it is requested and reused afterwards.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
}

/// Per-parameter gradients extracted from one backward pass.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads(pub Vec<(String, Vec<f64>)>);

impl ParamGrads {
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in &self.0 {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))?;
        let v = self.tape.leaf(t.clone());
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    /// Backpropagates `loss` and returns gradients for every bound
    /// trainable parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (name, &v) in self.bound.borrow().iter() {
            let trainable = self.store.get(name).is_some_and(Tensor::requires_grad);
            if let (true, Some(g)) = (trainable, grads.get(v)) {
                out.push((name.clone(), g.to_vec()));
            }
        }
        Ok(ParamGrads(out))
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

/// Fully connected layer `y = xW + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert_uniform(format!("{}.w", self.name), &[self.input, self.output], self.input, rng)?;
        store.insert_uniform(format!("{}.b", self.name), &[self.output], self.input, rng)
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.name))?;
        let b = g.param(&format!("{}.b", self.name))?;
        g.matmul_add(x, w, Some(b))
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden…, out]`.
    pub fn new(name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(format!("{name}.l{i}"), d[0], d[1]))
            .collect();
        Mlp { layers }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn forward(&self, g: &Graph<'_>, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(W_z [x, h] + b_z)
/// r  = σ(W_r [x, h] + b_r)
/// n  = tanh(W_n [x, r ⊙ h] + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// `W_z` and `W_r` are stored side by side as `{name}.w_zr`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        GruCell {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let fan = self.input + self.hidden;
        let h = self.hidden;
        store.insert_uniform(format!("{}.w_zr", self.name), &[fan, 2 * h], fan, rng)?;
        store.insert_uniform(format!("{}.b_zr", self.name), &[2 * h], fan, rng)?;
        store.insert_uniform(format!("{}.w_n", self.name), &[fan, h], fan, rng)?;
        store.insert_uniform(format!("{}.b_n", self.name), &[h], fan, rng)
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (g.shape(x), g.shape(h));
        if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] || xs[1] != self.input || hs[1] != self.hidden
        {
            return Err(AutodiffError::Dimension {
                op: "gru_cell",
                lhs: xs,
                rhs: hs,
            });
        }
        let w_zr = g.param(&format!("{}.w_zr", self.name))?;
        let b_zr = g.param(&format!("{}.b_zr", self.name))?;
        let w_n = g.param(&format!("{}.w_n", self.name))?;
        let b_n = g.param(&format!("{}.b_n", self.name))?;

        let xh = g.concat(&[x, h])?;
        let zr = g.sigmoid(g.matmul_add(xh, w_zr, Some(b_zr))?);
        let z = g.slice(zr, 0, self.hidden)?;
        let r = g.slice(zr, self.hidden, self.hidden)?;
        let xrh = g.concat(&[x, g.mul(r, h)?])?;
        let n = g.tanh(g.matmul_add(xrh, w_n, Some(b_n))?);
        // (1 − z)·n + z·h  ==  n + z·(h − n)
        g.add(n, g.mul(z, g.sub(h, n)?)?)
    }
}

/// 2-D convolution with "same" zero padding and an odd kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(AutodiffError::Config(format!(
                "convolution kernel size must be odd, got {kernel}"
            )));
        }
        Ok(Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let k = self.kernel;
        let fan = self.in_ch * k * k;
        store.insert_uniform(format!("{}.w", self.name), &[self.out_ch, self.in_ch, k, k], fan, rng)?;
        store.insert_uniform(format!("{}.b", self.name), &[self.out_ch], fan, rng)
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.name))?;
        let b = g.param(&format!("{}.b", self.name))?;
        g.conv2d(x, w, b, self.kernel / 2)
    }
}

/// 2×2 stride-2 transposed convolution (spatial upsampling by two).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2x2 {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvTranspose2x2 {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        ConvTranspose2x2 {
            name: name.into(),
            in_ch,
            out_ch,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let fan = self.in_ch * 4;
        store.insert_uniform(format!("{}.w", self.name), &[self.in_ch, self.out_ch, 2, 2], fan, rng)?;
        store.insert_uniform(format!("{}.b", self.name), &[self.out_ch], fan, rng)
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.name))?;
        let b = g.param(&format!("{}.b", self.name))?;
        g.conv_transpose2x2(x, w, b)
    }
}

/// Convolutional LSTM without peephole connections:
///
/// ```text
/// [i, f, o, g] = conv([x, h])
/// c' = σ(f) ⊙ c + σ(i) ⊙ tanh(g)
/// h' = σ(o) ⊙ tanh(c')
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCell {
    pub input_ch: usize,
    pub hidden_ch: usize,
    conv: Conv2d,
}

impl ConvLstmCell {
    pub fn new(name: impl Into<String>, input_ch: usize, hidden_ch: usize, kernel: usize) -> Result<Self> {
        let conv = Conv2d::new(name, input_ch + hidden_ch, 4 * hidden_ch, kernel)?;
        Ok(ConvLstmCell {
            input_ch,
            hidden_ch,
            conv,
        })
    }

    pub fn name(&self) -> &str {
        &self.conv.name
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (xs, hs) = (g.shape(x), g.shape(h));
        if xs.len() != 4 || xs[1] != self.input_ch || hs.len() != 4 || hs[1] != self.hidden_ch {
            return Err(AutodiffError::Dimension {
                op: "convlstm_cell",
                lhs: xs,
                rhs: hs,
            });
        }
        if g.shape(c) != hs {
            return Err(AutodiffError::Dimension {
                op: "convlstm_cell state",
                lhs: hs,
                rhs: g.shape(c),
            });
        }
        let ch = self.hidden_ch;
        let gates = self.conv.forward(g, g.concat(&[x, h])?)?;
        let i = g.sigmoid(g.slice(gates, 0, ch)?);
        let f = g.sigmoid(g.slice(gates, ch, ch)?);
        let o = g.sigmoid(g.slice(gates, 2 * ch, ch)?);
        let cand = g.tanh(g.slice(gates, 3 * ch, ch)?);
        let c_next = g.add(g.mul(f, c)?, g.mul(i, cand)?)?;
        let h_next = g.mul(o, g.tanh(c_next))?;
        Ok((h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_store(init: impl FnOnce(&mut ParamStore)) -> ParamStore {
        let mut s = ParamStore::new();
        init(&mut s);
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for n in names {
            s.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        s
    }

    #[test]
    fn gru_zero_weights_average_state() {
        let cell = GruCell::new("gru", 3, 4);
        let mut rng = rand::rng();
        let store = zero_store(|s| cell.init(s, &mut rng).unwrap());
        let g = Graph::new(&store);
        let x = g.input(Tensor::full(&[2, 3], 0.3));
        let h = g.input(Tensor::full(&[2, 4], 1.0));
        let out = cell.forward(&g, x, h).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.5));

        let x = g.input(Tensor::zeros(&[2, 3]));
        let h = g.input(Tensor::zeros(&[2, 4]));
        let out = cell.forward(&g, x, h).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_rejects_hidden_mismatch() {
        let cell = GruCell::new("gru", 3, 4);
        let mut rng = rand::rng();
        let store = zero_store(|s| cell.init(s, &mut rng).unwrap());
        let g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, 3]));
        let h = g.input(Tensor::zeros(&[1, 5]));
        assert!(matches!(
            cell.forward(&g, x, h),
            Err(AutodiffError::Dimension { .. })
        ));
    }

    #[test]
    fn convlstm_zero_params() {
        let cell = ConvLstmCell::new("lstm", 2, 3, 3).unwrap();
        let mut rng = rand::rng();
        let store = zero_store(|s| cell.init(s, &mut rng).unwrap());
        let g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let h = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let c = g.input(Tensor::full(&[1, 3, 4, 4], 1.0));
        let (h2, c2) = cell.forward(&g, x, h, c).unwrap();
        assert!(g.value(c2).data().iter().all(|&v| v == 0.5));
        let expect = 0.5 * 0.5f64.tanh();
        assert!(g.value(h2).data().iter().all(|&v| (v - expect).abs() < 1e-15));
        assert!((expect - 0.2311).abs() < 1e-4);

        let c = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let (h2, c2) = cell.forward(&g, x, h, c).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_kernels_are_rejected() {
        assert!(matches!(
            ConvLstmCell::new("lstm", 1, 1, 2),
            Err(AutodiffError::Config(_))
        ));
        assert!(Conv2d::new("c", 1, 1, 4).is_err());
    }

    #[test]
    fn convlstm_channel_mismatch() {
        let cell = ConvLstmCell::new("lstm", 2, 3, 3).unwrap();
        let mut rng = rand::rng();
        let store = zero_store(|s| cell.init(s, &mut rng).unwrap());
        let g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let h = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let c = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(cell.forward(&g, x, h, c).is_err());
    }
}
