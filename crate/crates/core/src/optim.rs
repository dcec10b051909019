//! First-order adaptive-moment optimizer and learning-rate schedules.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Rebuilds the moment buffers after the parameter rows were reordered,
    /// duplicated or dropped: row `r` of the result takes the state of
    /// `sources[r]`, or zeros for `None`. `stride` is the row width.
    pub fn remap(&mut self, sources: &[Option<usize>], stride: usize) {
        let take = |buf: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(sources.len() * stride);
            for s in sources {
                match s {
                    Some(i) => out.extend_from_slice(&buf[i * stride..(i + 1) * stride]),
                    None => out.extend(std::iter::repeat(0.0).take(stride)),
                }
            }
            out
        };
        self.m = take(&self.m);
        self.v = take(&self.v);
    }
}

/// Log-linear interpolation from `start` at step 0 to `end` at step `total`.
pub fn exp_decay(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    let t = (step as f64 / total as f64).clamp(0.0, 1.0);
    (start.ln() * (1.0 - t) + end.ln() * t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(2);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut x, &g, 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = vec![1.0];
        let mut adam = Adam::new(1);
        adam.step(&mut x, &[0.37], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn remap_copies_rows() {
        let mut adam = Adam::new(4);
        let mut x = vec![0.0; 4];
        adam.step(&mut x, &[1.0, 2.0, 3.0, 4.0], 0.1);
        adam.remap(&[Some(1), None, Some(0)], 2);
        assert_eq!(adam.len(), 6);
        assert!((adam.m[0] - 0.3).abs() < 1e-12);
        assert_eq!(adam.m[2], 0.0);
        assert!((adam.m[4] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn decay_endpoints() {
        assert!((exp_decay(0.01, 0.00025, 0, 100) - 0.01).abs() < 1e-15);
        assert!((exp_decay(0.01, 0.00025, 100, 100) - 0.00025).abs() < 1e-15);
    }
}
