//! Small MLP mapping a control point and a normalized time to a 6-DoF
//! transform (axis-angle rotation, translation), with hand-written backprop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::se3::axis_angle_to_raw;

#[derive(Debug, Clone, PartialEq)]
pub struct DeformNet {
    pub hidden: usize,
    pub position_bands: usize,
    pub time_bands: usize,
    /// `[W1, b1, W2, b2, W3, b3]`, weights row-major (out × in).
    pub params: Vec<f64>,
}

/// Output of one query, with the intermediates backprop needs.
#[derive(Debug, Clone)]
pub struct NetEval {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
    /// Raw unit quaternion `[w, x, y, z]` of `axis_angle`.
    pub rotation: [f64; 4],
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    position: [f64; 3],
}

struct Layout {
    d: usize,
    h: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

const OUT: usize = 6;

impl DeformNet {
    pub fn input_dim(position_bands: usize, time_bands: usize) -> usize {
        3 * (1 + 2 * position_bands) + 1 + 2 * time_bands
    }

    fn layout(&self) -> Layout {
        let d = Self::input_dim(self.position_bands, self.time_bands);
        let h = self.hidden;
        let w1 = 0;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + OUT * h;
        Layout {
            d,
            h,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + OUT,
        }
    }

    /// Xavier-uniform hidden layers; the output layer starts at zero so the
    /// initial deformation is the identity.
    pub fn new(
        hidden: usize,
        position_bands: usize,
        time_bands: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut net = Self {
            hidden,
            position_bands,
            time_bands,
            params: Vec::new(),
        };
        let l = net.layout();
        let mut params = vec![0.0; l.len];
        let a1 = (6.0 / (l.d + l.h) as f64).sqrt();
        for p in &mut params[l.w1..l.b1] {
            *p = rng.gen_range(-a1..a1);
        }
        let a2 = (6.0 / (2 * l.h) as f64).sqrt();
        for p in &mut params[l.w2..l.b2] {
            *p = rng.gen_range(-a2..a2);
        }
        net.params = params;
        net
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn encode(&self, p: &[f64; 3], t: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(Self::input_dim(self.position_bands, self.time_bands));
        for &c in p {
            x.push(c);
            for b in 0..self.position_bands {
                let f = (1u64 << b) as f64 * std::f64::consts::PI;
                x.push((f * c).sin());
                x.push((f * c).cos());
            }
        }
        x.push(t);
        for b in 0..self.time_bands {
            let f = (1u64 << b) as f64 * std::f64::consts::PI;
            x.push((f * t).sin());
            x.push((f * t).cos());
        }
        x
    }

    pub fn query(&self, p: &[f64; 3], t: f64) -> NetEval {
        let l = self.layout();
        let w = &self.params;
        let input = self.encode(p, t);
        let mut h1 = vec![0.0; l.h];
        for (i, h) in h1.iter_mut().enumerate() {
            let row = &w[l.w1 + i * l.d..l.w1 + (i + 1) * l.d];
            *h = (w[l.b1 + i] + dot(row, &input)).tanh();
        }
        let mut h2 = vec![0.0; l.h];
        for (i, h) in h2.iter_mut().enumerate() {
            let row = &w[l.w2 + i * l.h..l.w2 + (i + 1) * l.h];
            *h = (w[l.b2 + i] + dot(row, &h1)).tanh();
        }
        let mut out = [0.0; OUT];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &w[l.w3 + i * l.h..l.w3 + (i + 1) * l.h];
            *o = w[l.b3 + i] + dot(row, &h2);
        }
        let axis_angle = [out[0], out[1], out[2]];
        NetEval {
            axis_angle,
            translation: [out[3], out[4], out[5]],
            rotation: axis_angle_to_raw(&axis_angle),
            input,
            h1,
            h2,
            position: *p,
        }
    }

    /// Accumulates `dL/dparams` into `grad` and returns `dL/dposition`, given
    /// the gradient of the six raw outputs.
    pub fn backward(&self, eval: &NetEval, g_out: &[f64; 6], grad: &mut [f64]) -> [f64; 3] {
        let l = self.layout();
        let w = &self.params;
        let mut g_h2 = vec![0.0; l.h];
        for i in 0..OUT {
            let go = g_out[i];
            if go == 0.0 {
                continue;
            }
            grad[l.b3 + i] += go;
            let base = l.w3 + i * l.h;
            for j in 0..l.h {
                grad[base + j] += go * eval.h2[j];
                g_h2[j] += go * w[base + j];
            }
        }
        let g_z2: Vec<f64> = g_h2
            .iter()
            .zip(&eval.h2)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let mut g_h1 = vec![0.0; l.h];
        for i in 0..l.h {
            let gz = g_z2[i];
            if gz == 0.0 {
                continue;
            }
            grad[l.b2 + i] += gz;
            let base = l.w2 + i * l.h;
            for j in 0..l.h {
                grad[base + j] += gz * eval.h1[j];
                g_h1[j] += gz * w[base + j];
            }
        }
        let mut g_x = vec![0.0; l.d];
        for i in 0..l.h {
            let gz = g_h1[i] * (1.0 - eval.h1[i] * eval.h1[i]);
            if gz == 0.0 {
                continue;
            }
            grad[l.b1 + i] += gz;
            let base = l.w1 + i * l.d;
            for j in 0..l.d {
                grad[base + j] += gz * eval.input[j];
                g_x[j] += gz * w[base + j];
            }
        }
        let mut g_p = [0.0; 3];
        let stride = 1 + 2 * self.position_bands;
        for c in 0..3 {
            let off = c * stride;
            let x = eval.position[c];
            let mut g = g_x[off];
            for b in 0..self.position_bands {
                let f = (1u64 << b) as f64 * std::f64::consts::PI;
                g += g_x[off + 1 + 2 * b] * f * (f * x).cos();
                g -= g_x[off + 2 + 2 * b] * f * (f * x).sin();
            }
            g_p[c] = g;
        }
        g_p
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_net(seed: u64) -> DeformNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DeformNet::new(16, 3, 2, &mut rng);
        for p in net.params.iter_mut() {
            if *p == 0.0 {
                *p = rng.gen_range(-0.3..0.3);
            }
        }
        net
    }

    fn scalar(net: &DeformNet, p: &[f64; 3], t: f64, g: &[f64; 6]) -> f64 {
        let e = net.query(p, t);
        let out = [
            e.axis_angle[0],
            e.axis_angle[1],
            e.axis_angle[2],
            e.translation[0],
            e.translation[1],
            e.translation[2],
        ];
        out.iter().zip(g).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_initialized_head_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DeformNet::new(64, 6, 4, &mut rng);
        for (p, t) in [([0.1, 0.2, 1.0], 0.0), ([-1.0, 3.0, 2.0], 0.7)] {
            let e = net.query(&p, t);
            assert_eq!(e.axis_angle, [0.0; 3]);
            assert_eq!(e.translation, [0.0; 3]);
            assert_eq!(e.rotation, [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn queries_are_deterministic() {
        let net = random_net(3);
        let a = net.query(&[0.3, -0.2, 1.1], 0.4);
        let b = net.query(&[0.3, -0.2, 1.1], 0.4);
        assert_eq!(a.axis_angle, b.axis_angle);
        assert_eq!(a.translation, b.translation);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = random_net(5);
        let p = [0.3, -0.2, 1.1];
        let t = 0.4;
        let g = [0.3, -0.7, 0.2, 1.0, -0.4, 0.6];
        let e = net.query(&p, t);
        let mut grad = vec![0.0; net.param_count()];
        let g_p = net.backward(&e, &g, &mut grad);
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let i = rng.gen_range(0..net.param_count());
            let orig = net.params[i];
            net.params[i] = orig + h;
            let fp = scalar(&net, &p, t, &g);
            net.params[i] = orig - h;
            let fm = scalar(&net, &p, t, &g);
            net.params[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "{i}: {fd} vs {}",
                grad[i]
            );
        }
        for c in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[c] += h;
            pm[c] -= h;
            let fd = (scalar(&net, &pp, t, &g) - scalar(&net, &pm, t, &g)) / (2.0 * h);
            assert!((fd - g_p[c]).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
    }
}
