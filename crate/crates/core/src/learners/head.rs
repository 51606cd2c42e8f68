//! Softmax head: an optional tanh hidden layer followed by a linear layer.
//!
//! Parameter layout (flat, row-major): `W1 [hidden x input]`, `b1 [hidden]`,
//! `W2 [classes x hidden]`, `b2 [classes]`. Without a hidden layer only
//! `W [classes x input]` and `b [classes]` are present.

use rand::Rng;

use crate::metrics::ClassMapping;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadShape {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl HeadShape {
    pub fn layers(&self) -> usize {
        if self.hidden == 0 {
            1
        } else {
            2
        }
    }

    fn first_out(&self) -> usize {
        if self.hidden == 0 {
            self.classes
        } else {
            self.hidden
        }
    }

    /// `(offset, param count, outputs, inputs)` of layer `l` (0 = closest to input).
    fn layer(&self, l: usize) -> (usize, usize, usize, usize) {
        let n_in0 = self.input;
        let n_out0 = self.first_out();
        let first = n_in0 * n_out0 + n_out0;
        match l {
            0 => (0, first, n_out0, n_in0),
            _ => (first, self.classes * self.hidden + self.classes, self.classes, self.hidden),
        }
    }

    pub fn num_params(&self) -> usize {
        (0..self.layers()).map(|l| self.layer(l).1).sum()
    }

    fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let (start, _, n_out, n_in) = self.layer(l);
        start..start + n_out * n_in + n_out
    }

    /// Xavier-uniform weights and zero biases for the top `depth` layers.
    pub fn reinit_top(&self, weights: &mut [f64], depth: usize, rng: &mut impl Rng) {
        let layers = self.layers();
        for l in layers.saturating_sub(depth)..layers {
            let (_, _, n_out, n_in) = self.layer(l);
            let range = self.layer_range(l);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let (w, b) = weights[range].split_at_mut(n_out * n_in);
            for v in w.iter_mut() {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
            b.fill(0.0);
        }
    }

    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut w = vec![0.0; self.num_params()];
        self.reinit_top(&mut w, self.layers(), rng);
        w
    }
}

/// Per-pixel supervision. With `reduced`, `class` is a coarse class and the
/// loss is taken on the summed probability of its fine classes.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub class: u8,
    pub reduced: Option<&'a ClassMapping>,
}

/// Scratch buffers for one forward/backward pass.
pub struct Workspace {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Workspace {
    pub fn new(shape: &HeadShape) -> Self {
        Self {
            hidden: vec![0.0; shape.hidden],
            probs: vec![0.0; shape.classes],
            dlogits: vec![0.0; shape.classes],
            dhidden: vec![0.0; shape.hidden],
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Class probabilities for one input row, written into `out`.
pub fn forward(shape: &HeadShape, weights: &[f64], x: &[f64], ws: &mut Workspace, out: &mut [f64]) {
    forward_ws(shape, weights, x, ws);
    out.copy_from_slice(&ws.probs);
}

fn forward_ws(shape: &HeadShape, weights: &[f64], x: &[f64], ws: &mut Workspace) {
    let f = shape.input;
    if shape.hidden == 0 {
        let (w, b) = weights.split_at(shape.classes * f);
        for k in 0..shape.classes {
            ws.probs[k] = b[k] + dot(&w[k * f..(k + 1) * f], x);
        }
    } else {
        let h = shape.hidden;
        let (w1, rest) = weights.split_at(h * f);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(shape.classes * h);
        for j in 0..h {
            ws.hidden[j] = (b1[j] + dot(&w1[j * f..(j + 1) * f], x)).tanh();
        }
        for k in 0..shape.classes {
            ws.probs[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], &ws.hidden);
        }
    }
    softmax_in_place(&mut ws.probs);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-entropy of one row; accumulates its gradient into `grad`.
pub fn accumulate(
    shape: &HeadShape,
    weights: &[f64],
    x: &[f64],
    target: Target<'_>,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    forward_ws(shape, weights, x, ws);
    let loss = match target.reduced {
        None => {
            let t = usize::from(target.class);
            for k in 0..shape.classes {
                ws.dlogits[k] = ws.probs[k] - f64::from(u8::from(k == t));
            }
            -ws.probs[t].max(f64::MIN_POSITIVE).ln()
        }
        Some(map) => {
            let group: f64 = (0..shape.classes)
                .filter(|&k| map.table[k] == target.class)
                .map(|k| ws.probs[k])
                .sum();
            let group = group.max(f64::MIN_POSITIVE);
            for k in 0..shape.classes {
                let inside = map.table[k] == target.class;
                ws.dlogits[k] = ws.probs[k] - if inside { ws.probs[k] / group } else { 0.0 };
            }
            -group.ln()
        }
    };

    let f = shape.input;
    if shape.hidden == 0 {
        let (gw, gb) = grad.split_at_mut(shape.classes * f);
        for k in 0..shape.classes {
            let d = ws.dlogits[k];
            gb[k] += d;
            for (g, xi) in gw[k * f..(k + 1) * f].iter_mut().zip(x) {
                *g += d * xi;
            }
        }
    } else {
        let h = shape.hidden;
        let w2 = &weights[h * f + h..h * f + h + shape.classes * h];
        let (gw1, rest) = grad.split_at_mut(h * f);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(shape.classes * h);
        ws.dhidden.fill(0.0);
        for k in 0..shape.classes {
            let d = ws.dlogits[k];
            gb2[k] += d;
            let row = &w2[k * h..(k + 1) * h];
            for j in 0..h {
                gw2[k * h + j] += d * ws.hidden[j];
                ws.dhidden[j] += d * row[j];
            }
        }
        for j in 0..h {
            let a = ws.hidden[j];
            let d = ws.dhidden[j] * (1.0 - a * a);
            gb1[j] += d;
            for (g, xi) in gw1[j * f..(j + 1) * f].iter_mut().zip(x) {
                *g += d * xi;
            }
        }
    }
    loss
}

/// Mean cross-entropy over a batch and its gradient.
pub fn loss_and_gradient(
    shape: &HeadShape,
    weights: &[f64],
    inputs: &[f64],
    targets: &[Target<'_>],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; weights.len()];
    let mut ws = Workspace::new(shape);
    let mut loss = 0.0;
    for (row, t) in inputs.chunks_exact(shape.input).zip(targets) {
        loss += accumulate(shape, weights, row, *t, &mut ws, &mut grad);
    }
    let n = targets.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn param_counts() {
        assert_eq!(HeadShape { input: 7, hidden: 0, classes: 2 }.num_params(), 16);
        assert_eq!(HeadShape { input: 7, hidden: 5, classes: 3 }.num_params(), 7 * 5 + 5 + 3 * 5 + 3);
    }

    #[test]
    fn partial_reinit_touches_only_top_layer() {
        let shape = HeadShape { input: 3, hidden: 4, classes: 2 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = shape.init(&mut rng);
        let mut w2 = w.clone();
        shape.reinit_top(&mut w2, 1, &mut rng);
        let first = 3 * 4 + 4;
        assert_eq!(&w[..first], &w2[..first]);
        assert_ne!(&w[first..], &w2[first..]);
    }
}
