//! Central finite-difference checking of tape gradients.

use crate::error::{Error, Result};

use super::{Node, Tape, Tensor};

/// Compares the tape's analytic gradient of a scalar-valued function against
/// central finite differences, coordinate by coordinate, and returns the
/// worst relative error:
///
/// |analytic - fd| / max(1e-8, |analytic| + |fd|)
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, &[Node]) -> Result<Node>,
{
    if eps <= 0.0 {
        return Err(Error::usage("grad_check: eps must be positive".to_string()));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let nodes: Vec<Node> = tensors.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &nodes)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::usage(format!(
                "grad_check: function must be scalar-valued, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        Ok(tape.value(out).data()[0] as f64)
    };

    // Analytic pass.
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let nodes: Vec<Node> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &nodes)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::usage(format!(
                "grad_check: function must be scalar-valued, got shape {:?}",
                tape.value(out).shape()
            )));
        }
        let grads = tape.backward(out)?;
        nodes.iter().map(|&n| grads.get(n)).collect()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f32;
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;

            let fd = ((f_plus - f_minus) / (2.0 * eps as f64)) as f32;
            let a = analytic[ti].data()[j];
            let rel = (a - fd).abs() / f32::max(1e-8, a.abs() + fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
