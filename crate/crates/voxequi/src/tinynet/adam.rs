//! Adam optimizer over named parameter tensors.

use super::{NetGrads, TinyNet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: usize,
}

impl AdamState {
    pub fn new(net: &TinyNet) -> AdamState {
        let shapes: Vec<usize> = net.tensors().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam step.
    pub fn step(&mut self, net: &mut TinyNet, grads: &NetGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((tensor_idx, (_, params)), (_, g)) in
            net.tensors_mut().into_iter().enumerate().zip(&grads.tensors)
        {
            let m = &mut self.m[tensor_idx];
            let v = &mut self.v[tensor_idx];
            for i in 0..params.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}
