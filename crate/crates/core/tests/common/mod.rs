#![allow(dead_code, clippy::needless_range_loop)]

use csmc_core::frame::Frame;
use csmc_core::layers::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, relu_backward, relu_forward,
};
use csmc_core::mh::{gather_hypotheses, McHead};
use csmc_core::network::{BlockCnn, StageParams, StageTrace};
use csmc_core::sensing::SensingConfig;
use csmc_core::training::{loss, loss_and_grad};
use csmc_core::video::{BlockSample, RefPatch};
use csmc_core::{McMode, Model64, ModelConfig, NormStats, ParamSet, SearchWindow, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
/// Tolerance for single layers, small stacks and the MC head.
pub const LAYER_TOL: f64 = 1e-6;
/// Gradient tensors smaller than this in max-norm are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `|a - n|_inf / max(|a|_inf, |n|_inf, GRAD_FLOOR)`.
pub fn rel_err(analytic: &Tensor64, numeric: &Tensor64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic.max_abs().max(numeric.max_abs()).max(GRAD_FLOOR);
    diff / scale
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_tensor(x: &Tensor64, f: impl Fn(&Tensor64) -> f64) -> Tensor64 {
    let mut probe = x.clone();
    let mut out = Tensor64::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    out
}

/// Largest relative error between `analytic` and central differences over
/// every parameter tensor of `p`.
pub fn fd_params<P: ParamSet<f64> + Clone>(
    p: &P,
    analytic: Vec<&Tensor64>,
    f: impl Fn(&P) -> f64,
) -> f64 {
    let mut probe = p.clone();
    let count = probe.params().len();
    assert_eq!(count, analytic.len(), "gradient tensor count");
    let mut worst = 0.0f64;
    for t in 0..count {
        let len = probe.params()[t].len();
        let mut numeric = Tensor64::zeros(probe.params()[t].shape());
        for i in 0..len {
            let orig = probe.params()[t].data()[i];
            probe.params_mut()[t].data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.params_mut()[t].data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.params_mut()[t].data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic[t], &numeric));
    }
    worst
}

pub fn toy_config(mode: McMode, stages: usize) -> ModelConfig {
    ModelConfig {
        sensing: SensingConfig {
            block_size: 8,
            compression_factor: 4,
            noise_snr_db: None,
        },
        stages,
        window: SearchWindow::new(2, 2).unwrap(),
        mc_mode: mode,
        prelim_channels: vec![4, 3],
        residual_channels: vec![5, 4, 3, 2],
        matrix_seed: 3,
        init_seed: 5,
        tikhonov_lambda: None,
    }
}

/// Moves every parameter off its initial value. Zero biases can put a
/// pre-activation exactly on a ReLU kink, where central differences are
/// meaningless.
pub fn jitter<P: ParamSet<f64>>(p: &mut P, seed: u64) {
    let mut r = rng(seed);
    for t in p.params_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
}

pub fn toy_model(mode: McMode, stages: usize) -> Model64 {
    let mut m = Model64::new(toy_config(mode, stages)).unwrap();
    m.set_norm(NormStats {
        mean: 0.05,
        std: 0.6,
    })
    .unwrap();
    jitter(&mut m, 77);
    m
}

fn smooth_frame(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Frame<f64> {
    let (a, b, c) = (
        rng.random_range(0.1..0.4),
        rng.random_range(0.1..0.4),
        rng.random_range(0.0..6.0),
    );
    let data = (0..w * h)
        .map(|i| {
            let (r, col) = ((i / w) as f64, (i % w) as f64);
            0.5 + 0.3 * (a * r + c).sin() * (b * col).cos() + 0.1 * rng.random_range(-1.0..1.0)
        })
        .collect();
    Frame::new(w, h, data).unwrap()
}

/// Blocks whose reference is the same scene shifted by up to two pixels,
/// with a little noise. Every sample carries a reference.
pub fn toy_samples(n: usize, seed: u64, window: &SearchWindow) -> Vec<BlockSample<f64>> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let reference = smooth_frame(24, 24, &mut rng);
            let (dy, dx) = (rng.random_range(0..=2usize), rng.random_range(0..=2usize));
            let pos = (8, 8);
            let mut x = reference.block((pos.0 + dy, pos.1 + dx), 8).unwrap();
            for v in x.data_mut() {
                *v += 0.02 * rng.random_range(-1.0..1.0);
            }
            BlockSample {
                x,
                reference: Some(RefPatch::extract(&reference, pos, 8, window).unwrap()),
                video: 0,
                frame: i + 1,
                pos,
            }
        })
        .collect()
}

/// Worst relative error of each layer type against finite differences.
pub fn layer_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let (x, w, b, u) = (
        uniform(&[7], &mut r),
        uniform(&[5, 7], &mut r),
        uniform(&[5], &mut r),
        uniform(&[5], &mut r),
    );
    let g = fc_backward(&x, &w, &b, &u).unwrap();
    let obj =
        |x: &Tensor64, w: &Tensor64, b: &Tensor64| fc_forward(x, w, b).unwrap().dot(&u).unwrap();
    let e = rel_err(&g.d_input, &fd_tensor(&x, |t| obj(t, &w, &b)))
        .max(rel_err(&g.d_params[0], &fd_tensor(&w, |t| obj(&x, t, &b))))
        .max(rel_err(&g.d_params[1], &fd_tensor(&b, |t| obj(&x, &w, t))));
    out.push(("fc", e));

    let (x, k, b, u) = (
        uniform(&[2, 5, 4], &mut r),
        uniform(&[3, 2, 3, 3], &mut r),
        uniform(&[3], &mut r),
        uniform(&[3, 5, 4], &mut r),
    );
    let g = conv2d_backward(&x, &k, &b, &u).unwrap();
    let obj = |x: &Tensor64, k: &Tensor64, b: &Tensor64| {
        conv2d_forward(x, k, b).unwrap().dot(&u).unwrap()
    };
    let e = rel_err(&g.d_input, &fd_tensor(&x, |t| obj(t, &k, &b)))
        .max(rel_err(&g.d_params[0], &fd_tensor(&k, |t| obj(&x, t, &b))))
        .max(rel_err(&g.d_params[1], &fd_tensor(&b, |t| obj(&x, &k, t))));
    out.push(("conv2d", e));

    // Keep inputs away from the kink so central differences are valid.
    let x = uniform(&[16], &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let u = uniform(&[16], &mut r);
    let g = relu_backward(&x, &u).unwrap();
    let e = rel_err(
        &g.d_input,
        &fd_tensor(&x, |t| relu_forward(t).dot(&u).unwrap()),
    );
    out.push(("relu", e));

    // fc -> relu -> conv, the shape of every CNN entry
    let (x, w, b) = (
        uniform(&[5], &mut r),
        uniform(&[16, 5], &mut r),
        uniform(&[16], &mut r),
    );
    let (k, kb, u) = (
        uniform(&[2, 1, 3, 3], &mut r),
        uniform(&[2], &mut r),
        uniform(&[2, 4, 4], &mut r),
    );
    let stack = |x: &Tensor64, w: &Tensor64| {
        let h = relu_forward(&fc_forward(x, w, &b).unwrap())
            .reshape(&[1, 4, 4])
            .unwrap();
        conv2d_forward(&h, &k, &kb).unwrap().dot(&u).unwrap()
    };
    let pre = fc_forward(&x, &w, &b).unwrap();
    let h = relu_forward(&pre).reshape(&[1, 4, 4]).unwrap();
    let gc = conv2d_backward(&h, &k, &kb, &u).unwrap();
    let gr = relu_backward(&pre, &gc.d_input.reshape(&[16]).unwrap()).unwrap();
    let gf = fc_backward(&x, &w, &b, &gr.d_input).unwrap();
    let e = rel_err(&gf.d_input, &fd_tensor(&x, |t| stack(t, &w)))
        .max(rel_err(&gf.d_params[0], &fd_tensor(&w, |t| stack(&x, t))));
    out.push(("fc+relu+conv", e));

    let mut cnn = BlockCnn::init(6, 4, &[5, 3], true, &mut r);
    jitter(&mut cnn, seed + 1000);
    let (y, u) = (uniform(&[6], &mut r), uniform(&[16], &mut r));
    let trace = cnn.forward(&y).unwrap();
    let (g, d_y) = cnn
        .backward(&trace, &u.clone().reshape(&[1, 4, 4]).unwrap())
        .unwrap();
    let obj = |c: &BlockCnn<f64>, y: &Tensor64| c.forward(y).unwrap().output().dot(&u).unwrap();
    let e = fd_params(&cnn, g.params(), |c| obj(c, &y))
        .max(rel_err(&d_y, &fd_tensor(&y, |t| obj(&cnn, t))));
    out.push(("block_cnn", e));
    out
}

/// MC head parameter and estimate gradients of `<u, x_mc>`.
pub fn mc_head_gradient_error() -> f64 {
    let window = SearchWindow::new(2, 2).unwrap();
    let s = &toy_samples(1, 21, &window)[0];
    let rp = s.reference.as_ref().unwrap();
    let hyp = gather_hypotheses(&rp.patch, rp.pos, 8, &window).unwrap();
    let mut r = rng(12);
    let mut head = McHead::init(hyp.count(), &mut r);
    jitter(&mut head, 78);
    let est = s.x.map(|v| v + 0.05);
    let u = uniform(&[64], &mut r);
    let trace = head.forward(&hyp, &est).unwrap();
    let (g, d_est) = head.backward(&hyp, &trace, &u).unwrap();
    let obj = |h: &McHead<f64>, e: &Tensor64| h.forward(&hyp, e).unwrap().x_mc.dot(&u).unwrap();
    let e_params = fd_params(&head, g.params(), |h| obj(h, &est));
    let e_est = rel_err(&d_est, &fd_tensor(&est, |t| obj(&head, t)));
    e_params.max(e_est)
}

/// One stage's gradients of `<u, x_out> + c/2 |d|^2`, with the stage
/// matching against its own preliminary output and against an external
/// target.
pub fn stage_gradient_error(mode: McMode) -> f64 {
    let model = toy_model(mode, 1);
    let ctx = model.context(mode);
    let window = model.config.window;
    let s = &toy_samples(1, 31, &window)[0];
    let rp = s.reference.as_ref().unwrap();
    let hyp = gather_hypotheses(&rp.patch, rp.pos, 8, &window).unwrap();
    let y = csmc_core::sensing::measure(&model.phi, &s.x).unwrap();
    let mut r = rng(13);
    let u = uniform(&[64], &mut r);
    let c = 0.3;
    let stage = &model.stages[0];
    let external = s.x.map(|v| v * 0.9 + 0.03);
    let obj = |st: &StageParams<f64>, m: Option<&Tensor64>| {
        let t: StageTrace<f64> = st.forward(&ctx, &y, Some(&hyp), m).unwrap();
        t.x_out.dot(&u).unwrap() + 0.5 * c * t.d.norm_sq()
    };
    let mut worst = 0.0f64;
    for m in [None, Some(&external)] {
        let trace = stage.forward(&ctx, &y, Some(&hyp), m).unwrap();
        let (g, d_match) = stage
            .backward(&ctx, Some(&hyp), &trace, &u, c, m.is_none())
            .unwrap();
        worst = worst.max(fd_params(stage, g.params(), |st| obj(st, m)));
        match (m, mode) {
            (Some(_), McMode::Off) | (None, _) => assert!(d_match.is_none()),
            (Some(ext), _) => {
                let d = d_match.expect("external target gets a gradient");
                worst = worst.max(rel_err(&d, &fd_tensor(ext, |t| obj(stage, Some(t)))));
            }
        }
    }
    worst
}

/// Total-loss gradient on a batch of 2 with `lambda = 0.5`.
pub fn total_loss_gradient_error(mode: McMode, stages: usize) -> f64 {
    let model = toy_model(mode, stages);
    let batch = toy_samples(2, 41, &model.config.window);
    let (_, grad) = loss_and_grad(&model, &batch, 0.5).unwrap();
    fd_params(&model, grad.params(), |m| {
        loss(m, &batch, 0.5).unwrap().total
    })
}

/// Every gradient check, labelled.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for seed in 0..10 {
        for (name, e) in layer_gradient_errors(seed) {
            match out.iter_mut().find(|(n, _)| n == name) {
                Some(entry) => entry.1 = entry.1.max(e),
                None => out.push((name.to_string(), e)),
            }
        }
    }
    out.push(("mc_head".into(), mc_head_gradient_error()));
    for mode in [McMode::Learned, McMode::Lsq, McMode::Off] {
        out.push((format!("stage/{mode}"), stage_gradient_error(mode)));
    }
    for mode in [McMode::Learned, McMode::Lsq, McMode::Off] {
        out.push((
            format!("total_loss/{mode}/1-stage"),
            total_loss_gradient_error(mode, 1),
        ));
    }
    out.push((
        "total_loss/learned/2-stage".into(),
        total_loss_gradient_error(McMode::Learned, 2),
    ));
    out.push((
        "total_loss/lsq/2-stage".into(),
        total_loss_gradient_error(McMode::Lsq, 2),
    ));
    out
}

/// Dense Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Regularized normal equations built entry by entry from the columns.
pub fn lsq_oracle(columns: &[Vec<f64>], target: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let k = columns.len();
    let a: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let g: f64 = columns[i].iter().zip(&columns[j]).map(|(p, q)| p * q).sum();
                    if i == j {
                        g + lambda
                    } else {
                        g
                    }
                })
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().zip(target).map(|(p, q)| p * q).sum())
        .collect();
    let w = gauss_solve(a, rhs);
    let n = target.len();
    let x = (0..n)
        .map(|r| columns.iter().zip(&w).map(|(c, wk)| c[r] * wk).sum())
        .collect();
    (w, x)
}

/// Worst absolute deviations over `instances` random problems with `N = 256`:
/// `(regularized vs oracle, in-span reconstruction with lambda = 0)`.
pub fn lsq_oracle_errors(instances: usize, seed: u64) -> (f64, f64) {
    use csmc_core::mh::{default_tikhonov, lsq_predict};
    use csmc_core::HypothesisSet;
    let mut r = rng(seed);
    let n = 256;
    let (mut worst_oracle, mut worst_span) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let k = r.random_range(1..=81usize);
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| r.random_range(0.0..1.0)).collect())
            .collect();
        let hyp = HypothesisSet::from_columns(
            &cols
                .iter()
                .map(|c| Tensor64::from_vec(c.clone()))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let target: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let lambda = default_tikhonov(&hyp) * r.random_range(0.0..2.0);
        let (w, x) = lsq_predict(&hyp, &Tensor64::from_vec(target.clone()), lambda).unwrap();
        let (w_ref, x_ref) = lsq_oracle(&cols, &target, lambda);
        for (a, b) in w
            .data()
            .iter()
            .zip(&w_ref)
            .chain(x.data().iter().zip(&x_ref))
        {
            worst_oracle = worst_oracle.max((a - b).abs());
        }

        let w_true: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
        let in_span: Vec<f64> = (0..n)
            .map(|row| cols.iter().zip(&w_true).map(|(c, w)| c[row] * w).sum())
            .collect();
        let (_, x) = lsq_predict(&hyp, &Tensor64::from_vec(in_span.clone()), 0.0).unwrap();
        for (a, b) in x.data().iter().zip(&in_span) {
            worst_span = worst_span.max((a - b).abs());
        }
    }
    (worst_oracle, worst_span)
}

/// Worst `|residual_measure(measure(phi, x), phi, x)|` over random blocks.
pub fn residual_identity_error(trials: usize, seed: u64) -> f64 {
    use csmc_core::sensing::{make_matrix, measure, residual_measure};
    let phi = make_matrix::<f64>(&SensingConfig::default(), seed).unwrap();
    let mut r = rng(seed);
    (0..trials)
        .map(|_| {
            let x = uniform(&[256], &mut r);
            residual_measure(&measure(&phi, &x).unwrap(), &phi, &x)
                .unwrap()
                .max_abs()
        })
        .fold(0.0, f64::max)
}

/// Worst `|phi^T phi x - x|` for a square orthonormal matrix.
pub fn square_round_trip_error(trials: usize, seed: u64) -> f64 {
    use csmc_core::sensing::measure;
    use csmc_core::MeasurementMatrix;
    let phi = MeasurementMatrix::<f64>::gaussian_orthonormal(256, 256, seed).unwrap();
    let mut r = rng(seed);
    (0..trials)
        .map(|_| {
            let x = uniform(&[256], &mut r);
            phi.adjoint(&measure(&phi, &x).unwrap())
                .unwrap()
                .sub(&x)
                .unwrap()
                .max_abs()
        })
        .fold(0.0, f64::max)
}

/// Empirical SNR in dB of `add_noise` over `trials` seeds on one vector:
/// `10 log10(trials |y|^2 / sum |n_t|^2)`.
pub fn empirical_snr_db(snr_db: f64, trials: usize) -> f64 {
    use csmc_core::sensing::add_noise;
    let mut r = rng(99);
    let y = uniform(&[16], &mut r);
    let energy = y.norm_sq();
    let noise: f64 = (0..trials as u64)
        .map(|t| add_noise(&y, snr_db, t).unwrap().sub(&y).unwrap().norm_sq())
        .sum();
    10.0 * (trials as f64 * energy / noise).log10()
}
