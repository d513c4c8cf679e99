use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use num_traits::Float;

/// Adam with coupled L2 weight decay (the decay term is added to the gradient
/// before the moment updates).
#[derive(Debug, Clone)]
pub struct Adam<A> {
    pub lr: A,
    pub beta1: A,
    pub beta2: A,
    pub eps: A,
    pub weight_decay: A,
    m: Vec<ArrayD<A>>,
    v: Vec<ArrayD<A>>,
    t: i32,
}

impl<A: Float> Adam<A> {
    pub fn new(lr: A, weight_decay: A) -> Self {
        Self {
            lr,
            beta1: A::from(0.9).unwrap(),
            beta2: A::from(0.999).unwrap(),
            eps: A::from(1e-8).unwrap(),
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// `params` and `grads` must list tensors in the same order on every call.
    pub fn step(&mut self, params: Vec<ArrayViewMutD<'_, A>>, grads: Vec<ArrayViewD<'_, A>>) {
        assert_eq!(params.len(), grads.len(), "param/grad count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        self.t += 1;
        let one = A::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            Zip::from(p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = arr1(&[1.0f64, -2.0]).into_dyn();
        let g = arr1(&[0.5f64, -3.0]).into_dyn();
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(vec![p.view_mut()], vec![g.view()]);
        // bias-corrected first step is lr * sign(g)
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = arr1(&[3.0f64]).into_dyn();
        let mut opt = Adam::new(0.05, 1e-5);
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * (x - 1.0));
            opt.step(vec![p.view_mut()], vec![g.view()]);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
