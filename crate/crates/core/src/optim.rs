//! Optimizers over anything implementing [`Parameters`].

use crate::layers::Parameters;

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub fn global_norm<P: Parameters>(grad: &P) -> f64 {
    grad.named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grad` so its global norm is at most `max_norm`.
pub fn clip_global_norm<P: Parameters>(grad: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grad);
    if norm > max_norm && norm > 0.0 {
        for t in grad.tensors_mut() {
            t.scale(max_norm / norm);
        }
    }
    norm
}

/// SGD with classical momentum: `v = μ v + g; θ -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<P> {
    pub momentum: f64,
    velocity: P,
}

impl<P: Parameters> Sgd<P> {
    pub fn new(params: &P, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut P, grad: &P, lr: f64) {
        let grads: Vec<&crate::tensor::Matrix> = grad.named_tensors().into_iter().map(|(_, t)| t).collect();
        for ((v, p), g) in self
            .velocity
            .tensors_mut()
            .into_iter()
            .zip(params.tensors_mut())
            .zip(grads)
        {
            for ((vi, pi), gi) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<P> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: P,
    v: P,
    t: i32,
}

impl<P: Parameters> Adam<P> {
    pub fn new(params: &P) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut P, grad: &P, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let grads: Vec<&crate::tensor::Matrix> = grad.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (((m, v), p), g) in self
            .m
            .tensors_mut()
            .into_iter()
            .zip(self.v.tensors_mut())
            .zip(params.tensors_mut())
            .zip(grads)
        {
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;
    use crate::rng::RngState;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    fn quadratic_grad(p: &Linear) -> Linear {
        // loss = ½‖θ − 1‖²
        let mut g = p.clone();
        for t in g.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x -= 1.0);
        }
        g
    }

    #[test]
    fn both_optimizers_descend() {
        let mut rng = RngState::new(0);
        let init = Linear::new(3, 2, 1.0, &mut rng);
        let loss = |p: &Linear| global_norm(&quadratic_grad(p));
        let mut p = init.clone();
        let mut sgd = Sgd::new(&p, 0.9);
        for _ in 0..200 {
            let g = quadratic_grad(&p);
            sgd.step(&mut p, &g, 0.05);
        }
        assert!(loss(&p) < 1e-3 * loss(&init));
        let mut p = init.clone();
        let mut adam = Adam::new(&p);
        for _ in 0..500 {
            let g = quadratic_grad(&p);
            adam.step(&mut p, &g, 0.05);
        }
        assert!(loss(&p) < 1e-2 * loss(&init));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut rng = RngState::new(1);
        let mut g = Linear::new(4, 4, 10.0, &mut rng);
        clip_global_norm(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
