use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wsod_core::encoder::{encode, forward_cached, EncoderConfig, EncoderParams};
use wsod_core::params::Parameters;

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, w: &Array2<f64>, b: &ndarray::Array1<f64>) -> Mat {
    a.iter()
        .map(|row| {
            (0..w.ncols())
                .map(|j| b[j] + row.iter().enumerate().map(|(i, x)| x * w[[i, j]]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn norm(a: &Mat, g: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> Mat {
    a.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, x)| g[j] * (x - mean) / (var + 1e-5).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Loop-by-loop forward pass.
fn naive_encode(x: &Array2<f64>, p: &EncoderParams) -> Mat {
    let n = x.nrows();
    let d = p.config.dim;
    let hd = d / p.config.heads;
    let mut h: Mat = (0..n)
        .map(|i| (0..d).map(|j| x[[i, j]] + p.position_embedding[[i, j]]).collect())
        .collect();
    for l in &p.layers {
        let z = norm(&h, &l.ln1_gamma, &l.ln1_beta);
        let q = matmul(&z, &l.wq, &l.bq);
        let k = matmul(&z, &l.wk, &l.bk);
        let v = matmul(&z, &l.wv, &l.bv);
        let mut ctx = vec![vec![0.0; d]; n];
        for head in 0..p.config.heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in cols.clone() {
                    ctx[i][c] = (0..n).map(|j| e[j] / s * v[j][c]).sum();
                }
            }
        }
        h = add(&h, &matmul(&ctx, &l.wo, &l.bo));
        let z = norm(&h, &l.ln2_gamma, &l.ln2_beta);
        let a: Mat = matmul(&z, &l.w1, &l.b1)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        h = add(&h, &matmul(&a, &l.w2, &l.b2));
    }
    h
}

fn random_params(rng: &mut ChaCha8Rng, cfg: EncoderConfig) -> EncoderParams {
    let mut p = EncoderParams::zeros(cfg);
    p.visit_mut(&mut |name, _, d| {
        for v in d.iter_mut() {
            *v = if name.contains("gamma") { 1.0 } else { 0.0 } + rng.gen_range(-0.4..0.4);
        }
    });
    p
}

#[test]
fn matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let cfg = EncoderConfig {
            dim: 8,
            heads: 2,
            layers: 2,
            ff_dim: 12,
            max_tokens: 6,
        };
        let p = random_params(&mut rng, cfg);
        let n = rng.gen_range(1..=6);
        let x = Array2::from_shape_fn((n, 8), |_| rng.gen_range(-1.0..1.0));
        let got = encode(&x, &p).unwrap();
        let want = naive_encode(&x, &p);
        for i in 0..n {
            for j in 0..8 {
                assert!((got[[i, j]] - want[i][j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn fresh_init_is_identity_plus_position() {
    let cfg = EncoderConfig::default();
    let p = EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = Array2::from_shape_fn((5, 32), |(i, j)| (i * 32 + j) as f64 / 100.0);
    let y = encode(&x, &p).unwrap();
    let expected = &x + &p.position_embedding.slice(ndarray::s![..5, ..]);
    assert!(y.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn permutation_equivariance_depends_on_position_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = EncoderConfig {
        dim: 8,
        heads: 2,
        layers: 2,
        ff_dim: 16,
        max_tokens: 5,
    };
    let mut p = random_params(&mut rng, cfg);
    let x = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
    let perm = [3, 0, 4, 1, 2];
    let px = Array2::from_shape_fn((5, 8), |(i, j)| x[[perm[i], j]]);
    let permuted_rows = |y: &Array2<f64>| Array2::from_shape_fn((5, 8), |(i, j)| y[[perm[i], j]]);

    let (y, py) = (encode(&x, &p).unwrap(), encode(&px, &p).unwrap());
    let gap = (&permuted_rows(&y) - &py).mapv(f64::abs).sum();
    assert!(gap > 1e-3, "position embedding should break equivariance");

    p.position_embedding.fill(0.0);
    let (y, py) = (encode(&x, &p).unwrap(), encode(&px, &p).unwrap());
    let gap = (&permuted_rows(&y) - &py).mapv(f64::abs).sum();
    assert!(gap < 1e-10);

    let cache = forward_cached(&x, &p).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            for row in cache.attention(l, h).rows() {
                assert!(row.iter().all(|&a| a >= 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
