use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
            Activation::Identity => z,
        }
    }

    /// Value and first three derivatives at `z`.
    pub fn derivatives(self, z: f64) -> [f64; 4] {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let s = 1.0 - t * t;
                [t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)]
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                let ds = s * (1.0 - s);
                [softplus(z), s, ds, ds * (1.0 - 2.0 * s)]
            }
            Activation::Identity => [z, 1.0, 0.0, 0.0],
        }
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_values() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert!((Activation::Tanh.apply(40.0) - 1.0).abs() < 1e-15);
        assert!((Activation::Tanh.apply(-40.0) + 1.0).abs() < 1e-15);
        // softplus'' (0) = sigmoid'(0) = 1/4
        assert!((Activation::Softplus.derivatives(0.0)[2] - 0.25).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn derivatives_match_differences() {
        let h = 1e-5;
        for act in [Activation::Tanh, Activation::Softplus] {
            for &z in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
                let d = act.derivatives(z);
                for k in 1..4 {
                    let fd = (act.derivatives(z + h)[k - 1] - act.derivatives(z - h)[k - 1]) / (2.0 * h);
                    assert!((fd - d[k]).abs() < 1e-8, "{act:?} order {k} at {z}");
                }
            }
        }
    }
}
