//! Multinomial logistic regression on flat parameter vectors.
//!
//! Parameters are `(dims + 1) × classes`, row-major, with the bias as the last
//! row.

use super::data::Samples;

pub fn param_len(dims: usize, classes: usize) -> usize {
    (dims + 1) * classes
}

fn logits(w: &[f64], x: &[f64], classes: usize, out: &mut [f64]) {
    let dims = x.len();
    out.copy_from_slice(&w[dims * classes..(dims + 1) * classes]);
    for (j, &xj) in x.iter().enumerate() {
        let row = &w[j * classes..(j + 1) * classes];
        for k in 0..classes {
            out[k] += xj * row[k];
        }
    }
}

/// Softmax in place; returns `log Σ exp(z)`.
fn softmax(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Mean cross-entropy.
pub fn loss(w: &[f64], data: &Samples) -> f64 {
    let mut z = vec![0.0; data.classes];
    let mut total = 0.0;
    for i in 0..data.len() {
        logits(w, data.row(i), data.classes, &mut z);
        let y = data.labels[i];
        let zy = z[y];
        total += softmax(&mut z) - zy;
    }
    total / data.len() as f64
}

/// Gradient of [`loss`] with respect to `w`.
pub fn gradient(w: &[f64], data: &Samples) -> Vec<f64> {
    let classes = data.classes;
    let dims = data.dims;
    let mut g = vec![0.0; w.len()];
    let mut p = vec![0.0; classes];
    for i in 0..data.len() {
        let x = data.row(i);
        logits(w, x, classes, &mut p);
        softmax(&mut p);
        p[data.labels[i]] -= 1.0;
        for (j, &xj) in x.iter().enumerate() {
            let row = &mut g[j * classes..(j + 1) * classes];
            for k in 0..classes {
                row[k] += xj * p[k];
            }
        }
        let bias = &mut g[dims * classes..];
        for k in 0..classes {
            bias[k] += p[k];
        }
    }
    let n = data.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    g
}
