//! Oracles and check routines shared by the integration tests and the
//! acceptance runner. Each routine returns its worst error so callers can
//! either assert on it or report it.

#![allow(dead_code)]

use malora::adapters::Mode;
use malora::autodiff::{grad_check, Gradients, Tape, Var};
use malora::linalg::{kaiming_uniform, Matrix, Rng};
use malora::moe::{balance_loss, malora_init, AdapterConfig, AdapterLayer, MaloraFlags, MaloraGeometry, Method};
use malora::Result;

pub const SEEDS: u64 = 20;
pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

/// Replaces every adapter parameter with O(1) random values so no gradient
/// vanishes because of a zero initialization.
pub fn randomize(layer: &mut AdapterLayer, rng: &mut Rng) {
    for p in layer.params_mut() {
        if p.name != "base_w" {
            *p.value = rng.uniform_matrix(p.value.rows(), p.value.cols(), -0.8, 0.8);
        }
    }
}

// ---------------------------------------------------------------------------
// tape ops

type OpBuild = fn(&mut Tape<'_>, &[Var], u64) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<(usize, usize)>,
    build: OpBuild,
}

fn op(name: &'static str, shapes: &[(usize, usize)], build: OpBuild) -> OpCase {
    OpCase { name, shapes: shapes.to_vec(), build }
}

/// Reduces any node to a scalar through a fixed random weighting so every
/// output entry contributes to the loss with an O(1) weight.
fn weigh(tape: &mut Tape<'_>, v: Var, seed: u64) -> Result<Var> {
    let w = Rng::new(seed ^ 0xABCD).uniform_matrix(v.rows(), v.cols(), 0.5, 1.5);
    let c = tape.constant(w);
    let h = tape.hadamard(v, c)?;
    tape.sum(h)
}

/// One case per registered tape op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        op("add", &[(3, 4), (3, 4)], |t, v, s| {
            let y = t.add(v[0], v[1])?;
            weigh(t, y, s)
        }),
        op("sub", &[(3, 4), (3, 4)], |t, v, s| {
            let y = t.sub(v[0], v[1])?;
            weigh(t, y, s)
        }),
        op("hadamard", &[(3, 4), (3, 4)], |t, v, s| {
            let y = t.hadamard(v[0], v[1])?;
            weigh(t, y, s)
        }),
        op("scale", &[(2, 5)], |t, v, s| {
            let y = t.scale(v[0], -1.7)?;
            weigh(t, y, s)
        }),
        op("sum", &[(4, 3)], |t, v, _| {
            let sq = t.hadamard(v[0], v[0])?;
            t.sum(sq)
        }),
        op("matmul", &[(3, 4), (4, 5)], |t, v, s| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y, s)
        }),
        op("matmul_t", &[(3, 4), (5, 4)], |t, v, s| {
            let y = t.matmul_t(v[0], v[1])?;
            weigh(t, y, s)
        }),
        op("matmul_t row vector", &[(1, 4), (5, 4)], |t, v, s| {
            let y = t.matmul_t(v[0], v[1])?;
            weigh(t, y, s)
        }),
        op("transpose", &[(3, 5)], |t, v, s| {
            let y = t.transpose(v[0])?;
            weigh(t, y, s)
        }),
        op("softmax_rows", &[(4, 5)], |t, v, s| {
            let y = t.softmax_rows(v[0])?;
            weigh(t, y, s)
        }),
        // shift away from the kink so ε-perturbations never cross zero
        op("relu", &[(4, 5)], |t, v, s| {
            let sign = Rng::new(s).uniform_matrix(4, 5, -1.0, 1.0).map(|x| if x < 0.0 { -0.2 } else { 0.2 });
            let shift = t.constant(sign);
            let shifted = t.add(v[0], shift)?;
            let moved = t.hadamard(shifted, shifted)?;
            let centred = t.sub(moved, shift)?;
            let y = t.relu(centred)?;
            weigh(t, y, s)
        }),
        op("normalize_rows", &[(3, 4)], |t, v, s| {
            let pos = t.softmax_rows(v[0])?;
            let y = t.normalize_rows(pos)?;
            weigh(t, y, s)
        }),
        op("mask_select", &[(4, 4)], |t, v, s| {
            let mut r = Rng::new(s + 100);
            let mask = (0..16).map(|_| r.uniform() < 0.5).collect();
            let y = t.mask_select(v[0], mask)?;
            let sq = t.hadamard(y, y)?;
            weigh(t, sq, s)
        }),
        op("dropout", &[(5, 3)], |t, v, s| {
            let y = t.dropout(v[0], 0.3, &mut Rng::new(s + 7))?;
            let sq = t.hadamard(y, v[0])?;
            weigh(t, sq, s)
        }),
        op("gather_rows", &[(4, 3)], |t, v, s| {
            let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
            weigh(t, y, s)
        }),
        op("scatter_rows", &[(3, 3)], |t, v, s| {
            let y = t.scatter_rows(v[0], &[4, 1, 4], 5)?;
            weigh(t, y, s)
        }),
        op("row_scale", &[(4, 3), (4, 1)], |t, v, s| {
            let y = t.row_scale(v[0], v[1])?;
            weigh(t, y, s)
        }),
        op("select_col", &[(4, 3)], |t, v, s| {
            let y = t.select_col(v[0], 2)?;
            weigh(t, y, s)
        }),
        op("mean_rows", &[(4, 3)], |t, v, s| {
            let y = t.mean_rows(v[0])?;
            weigh(t, y, s)
        }),
        op("concat_rows", &[(2, 3), (3, 3)], |t, v, s| {
            let y = t.concat_rows(&[v[0], v[1], v[0]])?;
            weigh(t, y, s)
        }),
        op("mse_loss", &[(4, 3)], |t, v, s| {
            let target = Rng::new(s + 1).uniform_matrix(4, 3, -1.0, 1.0);
            t.mse_loss(v[0], &target)
        }),
        op("softmax_cross_entropy", &[(5, 4)], |t, v, s| {
            let mut r = Rng::new(s + 2);
            let labels: Vec<usize> = (0..5).map(|_| r.below(4)).collect();
            t.softmax_cross_entropy(v[0], &labels)
        }),
    ]
}

/// Worst relative error of `case` over `SEEDS` random instances.
pub fn op_fd_error(case: &OpCase) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let names: Vec<String> = (0..case.shapes.len()).map(|i| format!("p{i}")).collect();
        let params: Vec<(&str, Matrix)> = case
            .shapes
            .iter()
            .zip(&names)
            .map(|(&(r, c), n)| (n.as_str(), rng.uniform_matrix(r, c, -1.0, 1.0)))
            .collect();
        let report = grad_check(&params, FD_EPS, |tape, vars| (case.build)(tape, vars, seed)).unwrap();
        if report.max_rel_error > worst.0 {
            worst = (report.max_rel_error, format!("seed {seed} at {:?}", report.worst));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// whole layers

pub const N_IN: usize = 6;
pub const M_OUT: usize = 5;
pub const BATCH: usize = 7;

type Selection = Option<Vec<Vec<usize>>>;

fn layer_loss(
    layer: &AdapterLayer,
    x: &Matrix,
    target: &Matrix,
    dropout_seed: Option<u64>,
) -> (f64, Gradients, Selection) {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut rng = Rng::new(dropout_seed.unwrap_or(0));
    let mut mode = if dropout_seed.is_some() { Mode::Train(&mut rng) } else { Mode::Eval };
    let out = layer.forward(&mut tape, xv, &mut mode).unwrap();
    let mut loss = tape.mse_loss(out.y, target).unwrap();
    if let Some(route) = &out.route {
        let b = balance_loss(&mut tape, route, 0.1).unwrap();
        loss = tape.add(loss, b).unwrap();
    }
    let value = tape.scalar(loss);
    (value, tape.backward(loss).unwrap(), out.route.map(|r| r.selected))
}

/// Initial fourth-order central difference step for whole-layer checks.
const LAYER_STEP: f64 = 1e-3;
/// Denominator floor of the relative error; entries smaller than this are
/// compared on an absolute scale of `FD_TOL · REL_FLOOR`.
const REL_FLOOR: f64 = 1e-7;

/// Largest relative error between tape gradients and the fourth-order
/// stencil `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h` over every
/// trainable entry.
///
/// Top-K routing is piecewise smooth. When a stencil point changes any row's
/// expert selection the step is shrunk until it no longer does, so the
/// difference quotient never straddles a selection boundary.
pub fn layer_fd_error(
    layer: &mut AdapterLayer,
    x: &Matrix,
    target: &Matrix,
    dropout_seed: Option<u64>,
) -> (f64, String) {
    let (_, grads, base_sel) = layer_loss(layer, x, target, dropout_seed);
    let trainable: Vec<(String, usize)> =
        layer.params().iter().filter(|p| p.trainable).map(|p| (p.name.clone(), p.value.len())).collect();
    let mut worst = (0.0, String::new());
    for (name, len) in trainable {
        for k in 0..len {
            let at = |layer: &mut AdapterLayer, offset: f64| {
                let set = |layer: &mut AdapterLayer, delta: f64| {
                    let mut ps = layer.params_mut();
                    let p = ps.iter_mut().find(|p| p.name == name).unwrap();
                    p.value.data_mut()[k] += delta;
                };
                set(layer, offset);
                let (f, _, sel) = layer_loss(layer, x, target, dropout_seed);
                set(layer, -offset);
                (f, sel)
            };
            let mut h = LAYER_STEP;
            let numeric = loop {
                let pts: Vec<(f64, Selection)> = [h, -h, 2.0 * h, -2.0 * h].iter().map(|o| at(layer, *o)).collect();
                if pts.iter().all(|(_, sel)| *sel == base_sel) {
                    break (8.0 * (pts[0].0 - pts[1].0) - (pts[2].0 - pts[3].0)) / (12.0 * h);
                }
                h /= 10.0;
                assert!(h > 1e-9, "{name}[{k}] sits on a routing boundary");
            };
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[k]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}] analytic {analytic:.6e} numeric {numeric:.6e}"));
            }
        }
    }
    worst
}

/// Every method plus each ablation flag of the shared-subspace layer.
pub fn layer_variants() -> Vec<(&'static str, AdapterConfig)> {
    let moe = |method| AdapterConfig { n_experts: 4, top_k: 2, ..AdapterConfig::new(method, 2) };
    let malora = |flags| AdapterConfig { lambda: Some(0.5), flags, ..moe(Method::Malora) };
    let f = MaloraFlags::default();
    vec![
        ("lora", AdapterConfig::new(Method::Lora, 2)),
        ("asylora", AdapterConfig::new(Method::Asylora, 2)),
        ("molora", moe(Method::Molora)),
        ("moasylora", moe(Method::Moasylora)),
        ("molora renormalized", AdapterConfig { flags: MaloraFlags { renormalize: true, ..f }, ..moe(Method::Molora) }),
        ("malora", malora(f)),
        ("malora fixed S_A", malora(MaloraFlags { freeze_s_a: true, ..f })),
        ("malora w/o asymmetry", malora(MaloraFlags { no_asymmetry: true, ..f })),
        ("malora w/o shared S_A", malora(MaloraFlags { shared_subspace: false, ..f })),
        ("malora frozen P_t", malora(MaloraFlags { freeze_p_t: true, ..f })),
        ("malora decomposing B_t", malora(MaloraFlags { decompose_b_side: true, ..f })),
        ("malora renormalized", malora(MaloraFlags { renormalize: true, ..f })),
    ]
}

/// Randomized layer, batch and target for one seeded FD instance.
pub fn layer_instance(cfg: &AdapterConfig, seed: u64) -> (AdapterLayer, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    let base = rng.uniform_matrix(M_OUT, N_IN, -0.5, 0.5);
    let mut layer = AdapterLayer::build(base, cfg, &mut rng).unwrap();
    randomize(&mut layer, &mut rng);
    let x = rng.uniform_matrix(BATCH, N_IN, -1.0, 1.0);
    let target = rng.uniform_matrix(BATCH, M_OUT, -1.0, 1.0);
    (layer, x, target)
}

/// Worst FD error of one variant over `SEEDS` instances, with or without a
/// fixed dropout mask.
pub fn variant_fd_error(cfg: &AdapterConfig, dropout: bool) -> (f64, String) {
    let cfg = if dropout { AdapterConfig { dropout: 0.25, ..cfg.clone() } } else { cfg.clone() };
    let offset = if dropout { 2000 } else { 1000 };
    let mut worst = (0.0, String::new());
    for seed in 0..SEEDS {
        let (mut layer, x, target) = layer_instance(&cfg, offset + seed);
        let (err, at) = layer_fd_error(&mut layer, &x, &target, dropout.then_some(seed));
        if err > worst.0 {
            worst = (err, format!("seed {seed}: {at}"));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// routing

pub fn router(layer: &AdapterLayer) -> &Matrix {
    match layer {
        AdapterLayer::Molora(l) => &l.router_w,
        AdapterLayer::Malora(l) => &l.router_w,
        AdapterLayer::Lora(_) => panic!("not an MoE layer"),
    }
}

/// Evaluates every expert on every row and keeps the top-K by sorting
/// `(−p, index)` pairs.
pub fn dense_forward(layer: &AdapterLayer, x: &Matrix, k: usize, renormalize: bool) -> Matrix {
    let deltas: Vec<Matrix> = (0..layer.n_experts()).map(|t| layer.expert_delta(t)).collect();
    let rw = router(layer);
    let mut y = x.matmul_t(layer.base_w()).unwrap();
    for i in 0..x.rows() {
        let xi = x.slice_rows(i, i + 1);
        let logits = xi.matmul_t(rw).unwrap();
        let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.data().iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut order: Vec<(f64, usize)> = exps.iter().enumerate().map(|(t, e)| (-e / z, t)).collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let chosen = &order[..k];
        let norm: f64 = if renormalize { chosen.iter().map(|(p, _)| -p).sum() } else { 1.0 };
        for &(neg_p, t) in chosen {
            let contrib = xi.matmul_t(&deltas[t]).unwrap();
            for j in 0..y.cols() {
                let v = y.get(i, j) + (-neg_p / norm) * contrib.get(0, j);
                y.set(i, j, v);
            }
        }
    }
    y
}

pub fn sparse_forward(layer: &AdapterLayer, x: &Matrix) -> (Matrix, Vec<Vec<usize>>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = layer.forward(&mut tape, xv, &mut Mode::Eval).unwrap();
    (tape.value(out.y).clone(), out.route.unwrap().selected)
}

pub struct RoutingCase {
    pub max_diff: f64,
    pub exactly_k: bool,
}

/// One random MoE configuration (method, N, K, dims, renormalization)
/// compared against the dense oracle.
pub fn routing_case(case: u64) -> RoutingCase {
    let methods = [Method::Molora, Method::Moasylora, Method::Malora];
    let mut rng = Rng::new(case);
    let method = methods[case as usize % methods.len()];
    let n_experts = 2 + rng.below(7);
    let mut cfg = AdapterConfig::new(method, 1 + rng.below(3));
    cfg.n_experts = n_experts;
    cfg.top_k = 1 + rng.below(n_experts);
    cfg.flags = MaloraFlags { renormalize: case.is_multiple_of(5), ..MaloraFlags::default() };
    let (m, n) = (4 + rng.below(10), 4 + rng.below(10));
    if method == Method::Malora {
        let d = (cfg.rank * n_experts / 2).clamp(cfg.rank, n);
        cfg.shared_rank = Some(d);
        cfg.expanded_rank = Some(cfg.rank.min(d));
    }
    let base = rng.uniform_matrix(m, n, -1.0, 1.0);
    let mut layer = AdapterLayer::build(base, &cfg, &mut rng).unwrap();
    randomize(&mut layer, &mut rng);
    let batch = 1 + rng.below(20);
    let x = rng.normal_matrix(batch, n, 1.0);

    let (sparse, selected) = sparse_forward(&layer, &x);
    let dense = dense_forward(&layer, &x, cfg.top_k, cfg.flags.renormalize);
    RoutingCase { max_diff: sparse.max_abs_diff(&dense), exactly_k: selected.iter().all(|s| s.len() == cfg.top_k) }
}

// ---------------------------------------------------------------------------
// initialization

pub const INIT_GEOMETRIES: u64 = 100;

pub fn random_geometry(rng: &mut Rng) -> MaloraGeometry {
    let n_experts = 1 + rng.below(8);
    let base_rank = 1 + rng.below(4);
    let lambda = [0.25, 0.5, 0.75, 1.0][rng.below(4)];
    let in_dim = 32 + rng.below(40);
    let out_dim = 4 + rng.below(40);
    let beta = 0.1 + 4.0 * rng.uniform();
    let g = MaloraGeometry::from_lambda(base_rank, n_experts, lambda, 1.0, 1, in_dim, out_dim).or_else(|_| {
        // λ's rounding can put r̄ above d for small N; use d = rN, r̄ = r
        MaloraGeometry::explicit(base_rank, n_experts, base_rank * n_experts, base_rank, 1.0, 1, in_dim, out_dim)
    });
    g.unwrap().with_beta(beta)
}

/// `|P_0·S_A − K_0[:r̄]|` for the geometry drawn from `seed`.
pub fn first_expert_error(seed: u64) -> f64 {
    let g = random_geometry(&mut Rng::new(seed));
    let (s_a, coeffs) = malora_init(&g, &mut Rng::new(seed)).unwrap();
    let k0 = kaiming_uniform(g.shared_rank, g.in_dim, &mut Rng::new(seed)).unwrap();
    coeffs[0].matmul(&s_a).unwrap().max_abs_diff(&k0.slice_rows(0, g.expanded_rank))
}

/// Largest relative change of any `P_t·S_A` between `β = 1` and the drawn `β`.
pub fn beta_invariance_error(seed: u64) -> f64 {
    let g = random_geometry(&mut Rng::new(seed));
    let (s1, p1) = malora_init(&g.with_beta(1.0), &mut Rng::new(seed)).unwrap();
    let (sb, pb) = malora_init(&g, &mut Rng::new(seed)).unwrap();
    (0..g.n_experts)
        .map(|t| {
            let a = p1[t].matmul(&s1).unwrap();
            let b = pb[t].matmul(&sb).unwrap();
            a.max_abs_diff(&b) / a.max_abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

pub fn init_configs(rng: &mut Rng) -> Vec<AdapterConfig> {
    let n_experts = 4 + rng.below(5);
    let rank = 1 + rng.below(3);
    let moe = |method| AdapterConfig { n_experts, top_k: n_experts / 2, ..AdapterConfig::new(method, rank) };
    let mut malora = moe(Method::Malora);
    malora.lambda = Some(0.5);
    malora.beta = 0.5 + rng.uniform();
    vec![
        AdapterConfig::new(Method::Lora, rank),
        AdapterConfig::new(Method::Asylora, rank),
        moe(Method::Molora),
        moe(Method::Moasylora),
        AdapterConfig { shared_init_a: true, ..moe(Method::Molora) },
        malora,
    ]
}

/// Largest `|ΔW_t|` entry and largest deviation from the base output over
/// every method at `seed`.
pub fn init_delta_error(seed: u64) -> (f64, f64) {
    let mut rng = Rng::new(seed);
    let (m, n) = (4 + rng.below(20), 16 + rng.below(20));
    let base = rng.uniform_matrix(m, n, -1.0, 1.0);
    let x = rng.normal_matrix(5, n, 1.0);
    let expected = x.matmul_t(&base).unwrap();
    let (mut delta, mut output) = (0.0f64, 0.0f64);
    for cfg in init_configs(&mut rng) {
        let layer = AdapterLayer::build(base.clone(), &cfg, &mut rng).unwrap();
        for t in 0..layer.n_experts() {
            delta = delta.max(layer.expert_delta(t).max_abs());
        }
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = layer.forward(&mut tape, xv, &mut Mode::Eval).unwrap().y;
        output = output.max(tape.value(y).max_abs_diff(&expected));
    }
    (delta, output)
}
