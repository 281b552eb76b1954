//! Independent verification of the sampler's full conditionals and driver.
//!
//! Every Gibbs block is checked against a brute-force construction of the
//! same conditional: the block's design matrix is recovered by unit
//! perturbations of the mean surface, the Gaussian conditional is formed
//! densely from it, and the block's precision form must agree. Scale
//! parameters are checked through log-density ratios, and the whole sweep is
//! checked by the joint-distribution (successive-conditional) test.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use specwave::config::{
    DecayMode, EtaVariant, GammaMode, IgPrior, InterceptMode, KnotSpec, ModelConfig,
};
use specwave::data::WavelengthGrid;
use specwave::mcmc::blocks::{self, CorrCache, FactorOperator, Workspace};
use specwave::mcmc::{self, moves, MhSet, RunOptions};
use specwave::model::FitContext;
use specwave::spatial::exp_corr_matrix;
use specwave::state::ChainState;
use specwave::synth::{draw_truth, simulate, SynthSpec};

// --- fixtures --------------------------------------------------------------

fn small_grid() -> WavelengthGrid {
    WavelengthGrid::new(450.0, 950.0, 12).unwrap()
}

fn base_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        eta_variant: EtaVariant::Factor { r: 2 },
        beta_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 105.0 },
        gamma_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 131.25 },
        eta_knots: KnotSpec { lo: 437.5, hi: 962.5, spacing: 105.0 },
        sigma_knots: KnotSpec { lo: 440.0, hi: 960.0, spacing: 260.0 },
        ..ModelConfig::default()
    };
    cfg.mcmc.n_iter = 40;
    cfg.mcmc.n_burn = 20;
    cfg.mcmc.n_keep = 10;
    cfg.mcmc.seed = 5;
    cfg
}

/// Simulate a small dataset and return its fitting context together with a
/// fresh state drawn from the priors (so no block sits at a degenerate zero).
fn fixture(seed: u64, edit: impl FnOnce(&mut ModelConfig)) -> (FitContext, ChainState) {
    let mut cfg = base_config();
    edit(&mut cfg);
    let spec = SynthSpec::new(6, 3, 20, small_grid(), cfg);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let out = simulate(&spec, &mut rng).unwrap();
    let state = draw_truth(&out.context, &mut rng).unwrap();
    (out.context, state)
}

// --- the brute-force conditional -----------------------------------------------

fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Per-cell noise precisions of the flattened surface.
fn cell_precisions(ctx: &FitContext, ws: &Workspace) -> Vec<f64> {
    let mut out = Vec::with_capacity(ctx.n_wave() * ctx.n_records());
    for _ in 0..ctx.n_records() {
        for t in 0..ctx.n_wave() {
            out.push(ws.bases.inv_sigma2[t]);
        }
    }
    out
}

/// Design matrix of a block, column `i` being the mean-surface change from a
/// unit increase of the block's component `i`.
fn design_by_perturbation(
    ctx: &FitContext,
    state: &ChainState,
    dim: usize,
    bump: &dyn Fn(&mut ChainState, usize),
) -> DMatrix<f64> {
    let base = flatten(&ctx.mean_surface(state).unwrap());
    let mut f = DMatrix::zeros(base.len(), dim);
    for i in 0..dim {
        let mut bumped = state.clone();
        bump(&mut bumped, i);
        let m = flatten(&ctx.mean_surface(&bumped).unwrap());
        f.set_column(i, &(m - &base));
    }
    f
}

/// Dense Gaussian conditional `(Q, b)` of a block with design `f`, current
/// value `v_cur`, and Gaussian prior `(q_prior, b_prior)`.
fn oracle_conditional(
    ctx: &FitContext,
    ws: &Workspace,
    f: &DMatrix<f64>,
    v_cur: &DVector<f64>,
    q_prior: &DMatrix<f64>,
    b_prior: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let weights = cell_precisions(ctx, ws);
    let restored = flatten(&ws.resid) + f * v_cur;
    let mut ftd = f.transpose();
    for (i, w) in weights.iter().enumerate() {
        ftd.column_mut(i).scale_mut(*w);
    }
    let q = q_prior + &ftd * f;
    let b = b_prior + ftd * restored;
    (q, b)
}

fn assert_close_mat(label: &str, got: &DMatrix<f64>, want: &DMatrix<f64>) {
    assert_eq!(got.shape(), want.shape(), "{label}: shape");
    let scale = want.amax().max(1.0);
    let diff = (got - want).amax();
    assert!(
        diff <= 1e-8 * scale,
        "{label}: max deviation {diff:.3e} (scale {scale:.3e})"
    );
}

fn assert_close_vec(label: &str, got: &DVector<f64>, want: &DVector<f64>) {
    assert_close_mat(label, &DMatrix::from_column_slice(got.len(), 1, got.as_slice()),
        &DMatrix::from_column_slice(want.len(), 1, want.as_slice()));
}

// --- Gaussian block oracles -----------------------------------------------------

#[test]
fn genus_mean_conditional_matches_dense_oracle() {
    let (ctx, state) = fixture(11, |_| {});
    let ws = Workspace::rebuild(&ctx, &state).unwrap();
    for g in 0..ctx.n_genera() {
        let f = design_by_perturbation(&ctx, &state, 1, &|s, _| s.genus_means[g] += 1.0);
        let (q, b) = oracle_conditional(
            &ctx,
            &ws,
            &f,
            &DVector::from_element(1, state.genus_means[g]),
            &DMatrix::from_element(1, 1, 1.0 / state.var_genus_mean),
            &DVector::from_element(1, state.grand_mean / state.var_genus_mean),
        );
        let (mean, var) = blocks::genus_mean_conditional(&ctx, &state, &ws, g);
        assert!((1.0 / var - q[(0, 0)]).abs() <= 1e-8 * q[(0, 0)].abs());
        assert!(
            (mean - b[0] / q[(0, 0)]).abs() <= 1e-8 * (b[0] / q[(0, 0)]).abs().max(1.0),
            "genus {g}: mean {mean} vs oracle {}",
            b[0] / q[(0, 0)]
        );
    }
}

#[test]
fn site_intercept_conditional_matches_dense_oracle() {
    let (ctx, state) = fixture(12, |_| {});
    let ws = Workspace::rebuild(&ctx, &state).unwrap();
    for g in 0..ctx.n_genera() {
        let dim = ctx.design().genus_sites[g].len();
        if dim == 0 {
            continue;
        }
        let f = design_by_perturbation(&ctx, &state, dim, &|s, i| s.site_intercepts[g][i] += 1.0);
        let corr = exp_corr_matrix(ctx.genus_dist(g), state.intercept_decay).unwrap();
        let corr_inv = corr.clone().try_inverse().unwrap();
        let (q_want, b_want) = oracle_conditional(
            &ctx,
            &ws,
            &f,
            &state.site_intercepts[g],
            &(&corr_inv / state.var_site_intercept),
            &DVector::zeros(dim),
        );
        let (q, b) = blocks::site_intercept_precision(&ctx, &state, &ws, &corr_inv, g);
        assert_close_mat(&format!("site-intercept Q, genus {g}"), &q, &q_want);
        assert_close_vec(&format!("site-intercept b, genus {g}"), &b, &b_want);
    }
}

#[test]
fn coefficient_conditional_matches_dense_oracle() {
    let (ctx, state) = fixture(13, |_| {});
    let ws = Workspace::rebuild(&ctx, &state).unwrap();
    let p = ctx.n_covariates();
    let jb = ctx.j_beta();
    let dim = p * jb;
    // Component j * jb + m is coefficient (covariate j, basis column m).
    let f = design_by_perturbation(&ctx, &state, dim, &|s, i| {
        s.coeffs[(i / jb, i % jb)] += 1.0;
    });
    let v_cur = DVector::from_fn(dim, |i, _| state.coeffs[(i / jb, i % jb)]);
    let (q_want, b_want) = oracle_conditional(
        &ctx,
        &ws,
        &f,
        &v_cur,
        &(DMatrix::identity(dim, dim) / state.var_coeff),
        &DVector::zeros(dim),
    );
    let (q, b) = blocks::coeff_precision(&ctx, &state, &ws);
    assert_close_mat("coefficient Q", &q, &q_want);
    assert_close_vec("coefficient b", &b, &b_want);
}

#[test]
fn wave_knot_conditionals_match_dense_oracle() {
    // Global curve.
    let (ctx, state) = fixture(14, |_| {});
    let ws = Workspace::rebuild(&ctx, &state).unwrap();
    let dim = ctx.j_gamma();
    let f = design_by_perturbation(&ctx, &state, dim, &|s, i| s.wave_knots[i] += 1.0);
    let (q_want, b_want) = oracle_conditional(
        &ctx,
        &ws,
        &f,
        &state.wave_knots,
        &(DMatrix::identity(dim, dim) / state.var_wave),
        &DVector::zeros(dim),
    );
    let (q, b) = blocks::wave_knot_precision(&ctx, &state, &ws);
    assert_close_mat("global wave-knot Q", &q, &q_want);
    assert_close_vec("global wave-knot b", &b, &b_want);

    // Per-genus curves around the shared one.
    let (ctx, state) = fixture(15, |cfg| cfg.gamma_mode = GammaMode::PerGenus);
    let ws = Workspace::rebuild(&ctx, &state).unwrap();
    let dim = ctx.j_gamma();
    for g in 0..ctx.n_genera() {
        let f = design_by_perturbation(&ctx, &state, dim, &|s, i| {
            s.wave_knots_genus.as_mut().unwrap()[(g, i)] += 1.0;
        });
        let v_cur = state.wave_knots_genus.as_ref().unwrap().row(g).transpose();
        let (q_want, b_want) = oracle_conditional(
            &ctx,
            &ws,
            &f,
            &v_cur,
            &(DMatrix::identity(dim, dim) / state.var_wave_genus),
            &(&state.wave_knots / state.var_wave_genus),
        );
        let (q, b) = blocks::genus_wave_knot_precision(&ctx, &state, &ws, g);
        assert_close_mat(&format!("genus {g} wave-knot Q"), &q, &q_want);
        assert_close_vec(&format!("genus {g} wave-knot b"), &b, &b_want);
    }

    // Hyper mean: genus knots are exchangeable draws around it.
    let (mean, var) = blocks::wave_hyper_mean_moments(&ctx, &state);
    let n_g = ctx.n_genera() as f64;
    for j in 0..dim {
        let prec = n_g / state.var_wave_genus + 1.0 / state.var_wave;
        let mut lin = 0.0;
        for g in 0..ctx.n_genera() {
            lin += state.wave_knots_genus.as_ref().unwrap()[(g, j)] / state.var_wave_genus;
        }
        assert!((var[j] - 1.0 / prec).abs() <= 1e-12);
        assert!((mean[j] - lin / prec).abs() <= 1e-10 * (lin / prec).abs().max(1.0));
    }
}

#[test]
fn factor_conditional_matches_dense_oracle() {
    let (ctx, state) = fixture(16, |cfg| {
        cfg.eta_variant = EtaVariant::Factor { r: 2 };
        cfg.factor_decays = DecayMode::FixedSequence { values: None };
    });
    let ws = Workspace::rebuild(&ctx, &state).unwrap();
    let op = FactorOperator::new(&state, &ws);
    let r = ctx.rank();

    let factor_prec: Vec<DMatrix<f64>> = (0..r)
        .map(|ftr| {
            exp_corr_matrix(ctx.site_dist(), state.factor_decays[ftr])
                .unwrap()
                .try_inverse()
                .unwrap()
        })
        .collect();

    for s in 0..ctx.n_sites() {
        let f = design_by_perturbation(&ctx, &state, r, &|st, i| st.factors[(s, i)] += 1.0);
        // Gaussian-process prior of w(s) | w(-s), factor by factor.
        let mut q_prior = DMatrix::zeros(r, r);
        let mut b_prior = DVector::zeros(r);
        for ftr in 0..r {
            q_prior[(ftr, ftr)] = factor_prec[ftr][(s, s)];
            for u in 0..ctx.n_sites() {
                if u != s {
                    b_prior[ftr] -= factor_prec[ftr][(s, u)] * state.factors[(u, ftr)];
                }
            }
        }
        let v_cur = state.factors.row(s).transpose();
        let (q_want, b_want) = oracle_conditional(&ctx, &ws, &f, &v_cur, &q_prior, &b_prior);
        let (q, b) = blocks::factor_precision(&ctx, &state, &ws, &op, &factor_prec, s);
        assert_close_mat(&format!("factor Q, site {s}"), &q, &q_want);
        assert_close_vec(&format!("factor b, site {s}"), &b, &b_want);
    }
}

#[test]
fn loading_conditional_matches_dense_oracle() {
    let cases: [(&str, EtaVariant); 4] = [
        ("factor", EtaVariant::Factor { r: 2 }),
        ("independent", EtaVariant::Independent),
        ("separable", EtaVariant::Separable),
        ("lmc", EtaVariant::Lmc),
    ];
    for (label, variant) in cases {
        let (ctx, state) = fixture(17, |cfg| {
            cfg.eta_variant = variant;
            if matches!(variant, EtaVariant::Separable) {
                cfg.factor_decays = DecayMode::FixedSingle { value: 0.08 };
            }
        });
        let ws = Workspace::rebuild(&ctx, &state).unwrap();
        for col in 0..ctx.rank() {
            let rows = blocks::loading_free_rows(&ctx, col);
            let dim = rows.len();
            let f = design_by_perturbation(&ctx, &state, dim, &|s, i| {
                s.loadings[(rows.start + i, col)] += 1.0;
            });
            let v_cur = state
                .loadings
                .column(col)
                .rows(rows.start, dim)
                .clone_owned();
            let (q_want, b_want) = oracle_conditional(
                &ctx,
                &ws,
                &f,
                &v_cur,
                &(DMatrix::identity(dim, dim) / state.var_loading),
                &DVector::zeros(dim),
            );
            let (q, b) = blocks::loading_precision(&ctx, &state, &ws, col);
            assert_close_mat(&format!("{label} loading Q, column {col}"), &q, &q_want);
            assert_close_vec(&format!("{label} loading b, column {col}"), &b, &b_want);
        }
    }
}

#[test]
fn conv_field_conditional_matches_dense_oracle() {
    let (ctx, state) = fixture(18, |cfg| {
        cfg.eta_variant = EtaVariant::SpatialConvolution;
    });
    let ws = Workspace::rebuild(&ctx, &state).unwrap();
    let n_wave = ctx.n_wave();

    // Independent reconstruction of the wavelength correlation.
    let waves = ctx.wave_values().to_vec();
    let mut wave_dist = DMatrix::zeros(n_wave, n_wave);
    for a in 0..n_wave {
        for b in 0..n_wave {
            wave_dist[(a, b)] = (waves[a] - waves[b]).abs();
        }
    }
    let rt = exp_corr_matrix(&wave_dist, ctx.config().priors.conv_field_corr_decay).unwrap();
    let rt_inv = rt.try_inverse().unwrap();

    for site in 0..ctx.n_sites() {
        let f = design_by_perturbation(&ctx, &state, n_wave, &|s, i| {
            s.conv_field.as_mut().unwrap()[(i, site)] += 1.0;
        });
        let v_cur = state.conv_field.as_ref().unwrap().column(site).clone_owned();
        let (q_want, b_want) = oracle_conditional(
            &ctx,
            &ws,
            &f,
            &v_cur,
            &(&rt_inv / state.var_conv_field),
            &DVector::zeros(n_wave),
        );
        let (q, b) = blocks::conv_site_precision(&ctx, &state, &ws, site);
        assert_close_mat(&format!("conv-field Q, site {site}"), &q, &q_want);
        assert_close_vec(&format!("conv-field b, site {site}"), &b, &b_want);
    }
}

// --- scalar conditionals via log-density curvature --------------------------------

/// Check a scalar Gaussian conditional `(mean, var)` against its target
/// log density: zero slope at the mean and curvature `-1/var`.
fn check_scalar_conditional(
    label: &str,
    mean: f64,
    var: f64,
    logpost: impl Fn(f64) -> f64,
) {
    let h = 1e-4 * var.sqrt();
    let slope = (logpost(mean + h) - logpost(mean - h)) / (2.0 * h);
    let curv = (logpost(mean + h) - 2.0 * logpost(mean) + logpost(mean - h)) / (h * h);
    assert!(
        slope.abs() <= 1e-4 * (1.0 / var),
        "{label}: slope at mean is {slope:.3e}"
    );
    assert!(
        (curv + 1.0 / var).abs() <= 1e-3 / var,
        "{label}: curvature {curv:.6e} vs {:.6e}",
        -1.0 / var
    );
}

#[test]
fn grand_mean_and_hyper_mean_match_their_targets() {
    let (ctx, state) = fixture(19, |_| {});

    let (mean, var) = blocks::grand_mean_conditional(&ctx, &state);
    let sd0 = ctx.config().priors.intercept_sd;
    let logpost = |x: f64| {
        let mut lp = -0.5 * x * x / (sd0 * sd0);
        for g in 0..ctx.n_genera() {
            let d = state.genus_means[g] - x;
            lp += -0.5 * d * d / state.var_genus_mean;
        }
        lp
    };
    check_scalar_conditional("grand mean", mean, var, logpost);

    let (mean, var) = blocks::mean_log_bandwidth_conditional(&ctx, &state);
    let prior = ctx.config().priors.mean_log_bandwidth;
    let ell = state.wave_bandwidths.map(f64::ln);
    let logpost = |x: f64| {
        let centered = &ell - DVector::from_element(ell.len(), x);
        let quad = (ctx.r_gamma_inv() * &centered).dot(&centered) / state.var_log_bandwidth;
        let d = x - prior.mean;
        -0.5 * quad - 0.5 * d * d / (prior.sd * prior.sd)
    };
    check_scalar_conditional("log-bandwidth mean", mean, var, logpost);
}

// --- scale parameters via density ratios ---------------------------------------------

/// Inverse-gamma log density at `v`, up to constants.
fn ig_logpdf(prior: &IgPrior, v: f64) -> f64 {
    -(prior.shape + 1.0) * v.ln() - prior.scale / v
}

/// The posterior `(shape, scale)` of a scale parameter must reproduce the
/// brute-force conditional density ratio between two test values.
fn check_ig_posterior(
    label: &str,
    prior: &IgPrior,
    posterior: (f64, f64),
    loglik_at: impl Fn(f64) -> f64,
) {
    let (shape, scale) = posterior;
    let (v1, v2) = (0.7, 1.9);
    let want = loglik_at(v1) + ig_logpdf(prior, v1) - loglik_at(v2) - ig_logpdf(prior, v2);
    let post = IgPrior { shape, scale };
    let got = ig_logpdf(&post, v1) - ig_logpdf(&post, v2);
    assert!(
        (got - want).abs() <= 1e-8 * want.abs().max(1.0),
        "{label}: density ratio {got:.10} vs brute force {want:.10}"
    );
}

/// Zero-mean multivariate normal log density with covariance `v * corr`.
fn mvn_logpdf(x: &DVector<f64>, corr: &DMatrix<f64>, v: f64) -> f64 {
    let n = x.len() as f64;
    let chol = corr.clone().cholesky().unwrap();
    let logdet = 2.0 * (0..x.len()).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
    let quad = chol.solve(x).dot(x);
    -0.5 * (n * v.ln() + logdet + quad / v)
}

#[test]
fn inverse_gamma_posteriors_match_density_ratios() {
    let (ctx, state) = fixture(20, |cfg| {
        cfg.gamma_mode = GammaMode::PerGenus;
        cfg.eta_variant = EtaVariant::Factor { r: 2 };
    });
    let priors = &ctx.config().priors;

    check_ig_posterior(
        "var_genus_mean",
        &priors.var_genus_mean,
        blocks::var_genus_mean_posterior(&ctx, &state),
        |v| {
            let mut lp = 0.0;
            for g in 0..ctx.n_genera() {
                let d = state.genus_means[g] - state.grand_mean;
                lp += -0.5 * (v.ln() + d * d / v);
            }
            lp
        },
    );

    let mut cache = CorrCache::new();
    check_ig_posterior(
        "var_site_intercept",
        &priors.var_site_intercept,
        blocks::var_site_intercept_posterior(&ctx, &state, &mut cache).unwrap(),
        |v| {
            let mut lp = 0.0;
            for g in 0..ctx.n_genera() {
                if state.site_intercepts[g].is_empty() {
                    continue;
                }
                let corr =
                    exp_corr_matrix(ctx.genus_dist(g), state.intercept_decay).unwrap();
                lp += mvn_logpdf(&state.site_intercepts[g], &corr, v);
            }
            lp
        },
    );

    check_ig_posterior(
        "var_coeff",
        &priors.var_coeff,
        blocks::var_coeff_posterior(&ctx, &state),
        |v| {
            let mut lp = 0.0;
            for j in 0..state.coeffs.nrows() {
                for m in 0..state.coeffs.ncols() {
                    let c = state.coeffs[(j, m)];
                    lp += -0.5 * (v.ln() + c * c / v);
                }
            }
            lp
        },
    );

    check_ig_posterior(
        "var_wave",
        &priors.var_wave,
        blocks::var_wave_posterior(&ctx, &state),
        |v| {
            state
                .wave_knots
                .iter()
                .map(|c| -0.5 * (v.ln() + c * c / v))
                .sum()
        },
    );

    check_ig_posterior(
        "var_wave_genus",
        &priors.var_wave_genus,
        blocks::var_wave_genus_posterior(&ctx, &state),
        |v| {
            let knots = state.wave_knots_genus.as_ref().unwrap();
            let mut lp = 0.0;
            for g in 0..knots.nrows() {
                for j in 0..knots.ncols() {
                    let d = knots[(g, j)] - state.wave_knots[j];
                    lp += -0.5 * (v.ln() + d * d / v);
                }
            }
            lp
        },
    );

    check_ig_posterior(
        "var_loading",
        &priors.var_loading,
        blocks::var_loading_posterior(&ctx, &state),
        |v| {
            let mut lp = 0.0;
            for col in 0..ctx.rank() {
                let rows = blocks::loading_free_rows(&ctx, col);
                for i in rows {
                    let a = state.loadings[(i, col)];
                    lp += -0.5 * (v.ln() + a * a / v);
                }
            }
            lp
        },
    );

    check_ig_posterior(
        "var_log_bandwidth",
        &priors.var_log_bandwidth,
        blocks::var_log_bandwidth_posterior(&ctx, &state),
        |v| {
            let ell = state.wave_bandwidths.map(f64::ln);
            let centered =
                &ell - DVector::from_element(ell.len(), state.mean_log_bandwidth);
            let corr = exp_corr_matrix(
                &wave_knot_dist(&ctx),
                ctx.config().priors.log_bandwidth_corr_decay,
            )
            .unwrap();
            mvn_logpdf(&centered, &corr, v)
        },
    );

    // The spatial-convolution field has its own scale.
    let (ctx, state) = fixture(21, |cfg| {
        cfg.eta_variant = EtaVariant::SpatialConvolution;
    });
    check_ig_posterior(
        "var_conv_field",
        &ctx.config().priors.var_conv_field,
        blocks::var_conv_field_posterior(&ctx, &state),
        |v| {
            let z = state.conv_field.as_ref().unwrap();
            let n_wave = ctx.n_wave();
            let waves = ctx.wave_values();
            let mut dist = DMatrix::zeros(n_wave, n_wave);
            for a in 0..n_wave {
                for b in 0..n_wave {
                    dist[(a, b)] = (waves[a] - waves[b]).abs();
                }
            }
            let corr =
                exp_corr_matrix(&dist, ctx.config().priors.conv_field_corr_decay).unwrap();
            (0..z.ncols())
                .map(|s| mvn_logpdf(&z.column(s).clone_owned(), &corr, v))
                .sum()
        },
    );
}

fn wave_knot_dist(ctx: &FitContext) -> DMatrix<f64> {
    let knots = ctx.gamma_knots();
    let j = knots.len();
    DMatrix::from_fn(j, j, |a, b| (knots[a] - knots[b]).abs())
}

// --- Metropolis helpers ---------------------------------------------------------------

#[test]
fn loglik_delta_matches_brute_force() {
    let mut rng = ChaCha20Rng::seed_from_u64(40);
    let (n_wave, n_rec, n_col) = (7, 9, 4);
    let resid = DMatrix::from_fn(n_wave, n_rec, |_, _| rng.sample::<f64, _>(StandardNormal));
    let delta = DMatrix::from_fn(n_wave, n_col, |_, _| rng.sample::<f64, _>(StandardNormal));
    let inv_s = DVector::from_fn(n_wave, |_, _| rng.gen_range(0.2..3.0));
    let col_of = |k: usize| k % n_col;

    let mut want = 0.0;
    for k in 0..n_rec {
        for t in 0..n_wave {
            let r = resid[(t, k)];
            let d = delta[(t, col_of(k))];
            want += -0.5 * ((r - d) * (r - d) - r * r) * inv_s[t];
        }
    }
    let got = moves::loglik_delta(&resid, &inv_s, &delta, col_of);
    assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
}

#[test]
fn coeff_bandwidth_move_recovers_its_prior_when_data_carry_no_signal() {
    use statrs::distribution::{ContinuousCDF, Gamma};

    // With zero coefficients the proposal's mean shift vanishes, so the move
    // must sample the bandwidth's own prior.
    let (ctx, mut state) = fixture(22, |_| {});
    state.coeffs.fill(0.0);
    let mut ws = Workspace::rebuild(&ctx, &state).unwrap();
    let mut block = specwave::mcmc::mh::MhBlock::new("coeff_bandwidth", 0.8);
    let mut rng = ChaCha20Rng::seed_from_u64(71);

    let mut draws = Vec::new();
    for i in 0..6000 {
        moves::mh_coeff_bandwidth(&ctx, &mut state, &mut ws, &mut block, false, &mut rng)
            .unwrap();
        if i % 8 == 0 {
            draws.push(state.coeff_bandwidth);
        }
    }
    draws.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

    let prior = ctx.config().priors.coeff_bandwidth;
    let dist = Gamma::new(prior.shape, prior.rate).unwrap();
    let n = draws.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, &x) in draws.iter().enumerate() {
        let cdf = dist.cdf(x);
        ks = ks
            .max((cdf - i as f64 / n).abs())
            .max(((i + 1) as f64 / n - cdf).abs());
    }
    assert!(
        ks < 0.1,
        "KS distance {ks:.4} from the Gamma prior over {} thinned draws",
        draws.len()
    );
    let rate = block.rate();
    assert!(rate > 0.05 && rate < 0.95, "degenerate acceptance {rate}");
}

// --- whole-sweep invariants ----------------------------------------------------------

fn variant_grid() -> Vec<(&'static str, ModelConfig)> {
    let mut out = Vec::new();

    let mut c = base_config();
    c.eta_variant = EtaVariant::Factor { r: 2 };
    c.factor_decays = DecayMode::RandomSequence;
    out.push(("factor-random-seq", c));

    let mut c = base_config();
    c.intercept_mode = InterceptMode::Genus;
    c.gamma_mode = GammaMode::PerGenus;
    c.beta_mode = specwave::config::BetaMode::Scalar;
    c.eta_variant = EtaVariant::SpatialOnly;
    c.factor_decays = DecayMode::FixedSingle { value: 0.08 };
    out.push(("spatial-only-scalar-beta", c));

    let mut c = base_config();
    c.gamma_mode = GammaMode::None;
    c.eta_variant = EtaVariant::Independent;
    c.factor_decays = DecayMode::RandomSingle;
    out.push(("independent-no-gamma", c));

    let mut c = base_config();
    c.intercept_mode = InterceptMode::Genus;
    c.eta_variant = EtaVariant::Separable;
    c.factor_decays = DecayMode::FixedSingle { value: 0.05 };
    out.push(("separable", c));

    let mut c = base_config();
    c.eta_variant = EtaVariant::Lmc;
    c.factor_decays = DecayMode::FixedSequence { values: None };
    out.push(("lmc", c));

    let mut c = base_config();
    c.intercept_mode = InterceptMode::Genus;
    c.eta_variant = EtaVariant::None;
    out.push(("no-eta", c));

    let mut c = base_config();
    c.eta_variant = EtaVariant::SpatialConvolution;
    out.push(("spatial-convolution", c));

    out
}

/// After any number of sweeps, the incrementally maintained residual must
/// equal the residual rebuilt from the state, and the variance curve must
/// match the one implied by the log-variance knots. Any missed restore or
/// stale basis in any block breaks this.
#[test]
fn sweeps_keep_the_residual_consistent_for_every_variant() {
    for (label, cfg) in variant_grid() {
        let spec = SynthSpec::new(6, 3, 20, small_grid(), cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let out = simulate(&spec, &mut rng).unwrap();
        let ctx = out.context;
        let mut state = ctx.init_state(&mut rng).unwrap();
        let mut cache = CorrCache::new();
        let mut mh = MhSet::new(&ctx.config().mcmc.steps);

        for sweep_idx in 0..25 {
            let ws = mcmc::sweep(&ctx, &mut state, &mut cache, &mut mh, true, &mut rng)
                .unwrap_or_else(|e| panic!("{label}: sweep {sweep_idx}: {e}"));
            let fresh = ctx.dataset().responses() - ctx.mean_surface(&state).unwrap();
            let drift = (&ws.resid - &fresh).amax();
            assert!(
                drift <= 1e-7,
                "{label}: sweep {sweep_idx}: residual drift {drift:.3e}"
            );
            let sigma2 = ctx
                .sigma_basis()
                .variance(&state.log_var_knots)
                .unwrap();
            let sdrift = (&ws.bases.sigma2 - &sigma2).amax();
            assert!(
                sdrift <= 1e-9 * sigma2.amax(),
                "{label}: sweep {sweep_idx}: variance drift {sdrift:.3e}"
            );
            assert!(state.all_finite(), "{label}: sweep {sweep_idx}: non-finite state");
        }
    }
}

#[test]
fn ordered_decay_constraint_holds_under_sampling() {
    let mut cfg = base_config();
    cfg.eta_variant = EtaVariant::Factor { r: 3 };
    cfg.factor_decays = DecayMode::RandomSequence;
    let spec = SynthSpec::new(6, 3, 20, small_grid(), cfg);
    let mut rng = ChaCha20Rng::seed_from_u64(44);
    let out = simulate(&spec, &mut rng).unwrap();
    let ctx = out.context;
    let mut state = ctx.init_state(&mut rng).unwrap();
    let mut cache = CorrCache::new();
    let mut mh = MhSet::new(&ctx.config().mcmc.steps);
    for _ in 0..60 {
        mcmc::sweep(&ctx, &mut state, &mut cache, &mut mh, true, &mut rng).unwrap();
        for f in 1..3 {
            assert!(
                state.factor_decays[f] > state.factor_decays[f - 1],
                "decays out of order: {:?}",
                state.factor_decays.as_slice()
            );
        }
        let (lo, hi) = ctx.config().priors.factor_decay_range;
        assert!(state.factor_decays.iter().all(|&d| d > lo && d < hi));
    }
}

// --- driver: keep rule, determinism, checkpoints ------------------------------------

#[test]
fn keep_rule_retains_the_thinned_positions() {
    let mut cfg = base_config();
    cfg.mcmc.n_iter = 10;
    cfg.mcmc.n_burn = 4;
    cfg.mcmc.n_keep = 3; // thin = floor(6 / 3) = 2: sweeps 6, 8, 10.
    cfg.mcmc.seed = 9;
    let spec = SynthSpec::new(6, 3, 20, small_grid(), cfg);
    let out = simulate(&spec, &mut ChaCha20Rng::seed_from_u64(50)).unwrap();
    let ctx = out.context;

    let result = mcmc::run_chain(&ctx, &RunOptions::default()).unwrap();
    assert_eq!(result.kept.len(), 3);

    // Mirror the driver by hand and snapshot the expected sweeps.
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut state = ctx.init_state(&mut rng).unwrap();
    let mut cache = CorrCache::new();
    let mut mh = MhSet::new(&ctx.config().mcmc.steps);
    let mut manual = Vec::new();
    for s in 1..=10 {
        let adapt = s <= 4; // same rule: adapting while sweep index < n_burn
        mcmc::sweep(&ctx, &mut state, &mut cache, &mut mh, adapt, &mut rng).unwrap();
        if s > 4 && (s - 4) % 2 == 0 {
            manual.push(state.clone());
        }
    }
    assert_eq!(manual.len(), 3);
    for (a, b) in result.kept.iter().zip(&manual) {
        assert_eq!(a, b, "kept draw differs from the mirrored driver");
    }
}

#[test]
fn resumed_chain_reproduces_the_uninterrupted_one_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("chain.ckpt");

    let mut cfg = base_config();
    cfg.mcmc.n_iter = 30;
    cfg.mcmc.n_burn = 10;
    cfg.mcmc.n_keep = 5;
    cfg.mcmc.seed = 13;
    cfg.mcmc.checkpoint_every = Some(13); // files at sweeps 13 and 26
    let spec = SynthSpec::new(6, 3, 20, small_grid(), cfg);
    let out = simulate(&spec, &mut ChaCha20Rng::seed_from_u64(51)).unwrap();
    let ctx = out.context;

    let opts = RunOptions { checkpoint: Some(ckpt.clone()), progress: None };
    let full = mcmc::run_chain(&ctx, &opts).unwrap();
    assert!(ckpt.exists(), "no checkpoint was written");

    // The file on disk is the sweep-26 snapshot; resuming it must land on
    // exactly the same retained draws, deviances, and tuning.
    let resumed = mcmc::resume_chain(&ctx, &ckpt, &RunOptions::default()).unwrap();
    assert_eq!(full.kept.len(), resumed.kept.len());
    for (a, b) in full.kept.iter().zip(&resumed.kept) {
        assert_eq!(a, b, "resumed draw differs bit-for-bit");
    }
    assert_eq!(full.deviances, resumed.deviances);
    assert_eq!(full.final_steps, resumed.final_steps);
}

#[test]
fn checkpoint_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("chain.ckpt");

    let mut cfg = base_config();
    cfg.mcmc.n_iter = 8;
    cfg.mcmc.n_burn = 2;
    cfg.mcmc.n_keep = 2;
    cfg.mcmc.checkpoint_every = Some(4);
    let spec = SynthSpec::new(6, 3, 20, small_grid(), cfg.clone());
    let out = simulate(&spec, &mut ChaCha20Rng::seed_from_u64(52)).unwrap();
    let ctx = out.context;
    let opts = RunOptions { checkpoint: Some(ckpt.clone()), progress: None };
    mcmc::run_chain(&ctx, &opts).unwrap();

    let mut other = cfg;
    other.mcmc.seed = 999;
    let ctx_other = FitContext::new(ctx.dataset().clone(), other).unwrap();
    let err = mcmc::resume_chain(&ctx_other, &ckpt, &RunOptions::default());
    assert!(err.is_err(), "a checkpoint from another configuration was accepted");
}

#[test]
fn dic_decomposition_is_consistent() {
    let mut cfg = base_config();
    cfg.mcmc.n_iter = 30;
    cfg.mcmc.n_burn = 10;
    cfg.mcmc.n_keep = 5;
    let spec = SynthSpec::new(6, 3, 20, small_grid(), cfg);
    let out = simulate(&spec, &mut ChaCha20Rng::seed_from_u64(53)).unwrap();
    let ctx = out.context;

    let result = mcmc::run_chain(&ctx, &RunOptions::default()).unwrap();
    let d = result.dic;
    assert!((d.dic - (d.dbar + d.p_d)).abs() < 1e-9);
    assert!((d.p_d - (d.dbar - d.d_at_mean)).abs() < 1e-9);
    let naive_dbar = result.deviances.iter().sum::<f64>() / result.deviances.len() as f64;
    assert!((d.dbar - naive_dbar).abs() <= 1e-9 * naive_dbar.abs());

    // Identical draws: the plug-in deviance is the common deviance and the
    // effective parameter count collapses to the deviance spread.
    let s = result.kept[0].clone();
    let dev = ctx.deviance(&s).unwrap();
    let two = specwave::mcmc::dic::dic_summary(&ctx, &[s.clone(), s], &[dev, dev]).unwrap();
    assert!((two.d_at_mean - dev).abs() <= 1e-6 * dev.abs());
    assert!(two.p_d.abs() <= 1e-6 * dev.abs());
}

// --- samples directory ------------------------------------------------------------

#[test]
fn samples_directory_round_trips_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base_config();
    cfg.mcmc.n_iter = 20;
    cfg.mcmc.n_burn = 8;
    cfg.mcmc.n_keep = 4;
    let spec = SynthSpec::new(6, 3, 20, small_grid(), cfg);
    let out = simulate(&spec, &mut ChaCha20Rng::seed_from_u64(54)).unwrap();
    let ctx = out.context;
    let result = mcmc::run_chain(&ctx, &RunOptions::default()).unwrap();

    let manifest = specwave::mcmc::samples::write_samples(&ctx, &result, dir.path()).unwrap();
    assert_eq!(manifest.n_draws, 4);
    assert!(manifest.files.iter().any(|f| f.file == "draws.json"));

    let archive = specwave::mcmc::samples::read_draws(dir.path()).unwrap();
    assert_eq!(archive.config_hash, result.config_hash);
    assert_eq!(archive.draws.len(), result.kept.len());
    for (a, b) in archive.draws.iter().zip(&result.kept) {
        assert_eq!(a, b, "draw changed across the JSON round trip");
    }
    assert_eq!(archive.deviances, result.deviances);

    // Flip one byte of the draws file: the checksum must catch it.
    let path = dir.path().join("draws.json");
    let mut text = std::fs::read_to_string(&path).unwrap();
    let pos = text.find("\"draws\"").unwrap() + 20;
    text.replace_range(pos..pos + 1, "7");
    std::fs::write(&path, text).unwrap();
    assert!(specwave::mcmc::samples::read_draws(dir.path()).is_err());
}

// --- joint-distribution (successive-conditional) test -------------------------------

/// Draw responses from the model at a given state.
fn gen_responses<R: Rng>(ctx: &FitContext, state: &ChainState, rng: &mut R) -> DMatrix<f64> {
    let mean = ctx.mean_surface(state).unwrap();
    let sigma = ctx
        .sigma_basis()
        .variance(&state.log_var_knots)
        .unwrap()
        .map(f64::sqrt);
    DMatrix::from_fn(mean.nrows(), mean.ncols(), |t, k| {
        mean[(t, k)] + sigma[t] * rng.sample::<f64, _>(StandardNormal)
    })
}

struct Summary {
    mean: f64,
    se: f64,
}

/// Batch-means summary, robust to the autocorrelation of the sampler chain.
fn batch_summary(xs: &[f64], n_batches: usize) -> Summary {
    let b = xs.len() / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|i| xs[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
        / (n_batches as f64 - 1.0);
    Summary { mean, se: (var / n_batches as f64).sqrt() }
}

/// The successive-conditional simulator: alternating a sweep with a fresh
/// data draw leaves the prior invariant, so long-run moments of the sampled
/// parameters must match forward draws from the prior. A biased conditional
/// in any block shifts them.
#[test]
fn joint_distribution_test_agrees_with_forward_prior_draws() {
    let mut cfg = base_config();
    cfg.eta_variant = EtaVariant::Factor { r: 2 };
    cfg.factor_decays = DecayMode::RandomSequence;
    // Moderate tails so low-order moments are informative.
    cfg.priors.intercept_sd = 2.0;
    cfg.priors.log_var_sd = 0.6;
    cfg.priors.mean_log_bandwidth = specwave::config::NormalPrior { mean: 3.2, sd: 0.25 };

    let grid = WavelengthGrid::new(450.0, 950.0, 8).unwrap();
    let spec = SynthSpec::new(4, 2, 10, grid, cfg);
    let mut rng = ChaCha20Rng::seed_from_u64(60);
    let out = simulate(&spec, &mut rng).unwrap();
    let ctx0 = out.context;

    // Forward draws from the prior.
    type Stat = Box<dyn Fn(&ChainState) -> f64>;
    let stats: Vec<(&str, Stat)> = vec![
        ("grand_mean", Box::new(|s: &ChainState| s.grand_mean)),
        ("mean_log_bandwidth", Box::new(|s: &ChainState| s.mean_log_bandwidth)),
        ("ln var_wave", Box::new(|s: &ChainState| s.var_wave.ln())),
        ("ln var_coeff", Box::new(|s: &ChainState| s.var_coeff.ln())),
        ("ln coeff_bandwidth", Box::new(|s: &ChainState| s.coeff_bandwidth.ln())),
        ("intercept_decay", Box::new(|s: &ChainState| s.intercept_decay)),
        ("first factor decay", Box::new(|s: &ChainState| s.factor_decays[0])),
        ("ln var_genus_mean", Box::new(|s: &ChainState| s.var_genus_mean.ln())),
        ("first genus mean", Box::new(|s: &ChainState| s.genus_means[0])),
        ("first log-var knot", Box::new(|s: &ChainState| s.log_var_knots[0])),
    ];

    let n_prior = 20_000;
    let mut prior_samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_prior); stats.len()];
    for _ in 0..n_prior {
        let s = draw_truth(&ctx0, &mut rng).unwrap();
        for (j, (_, f)) in stats.iter().enumerate() {
            prior_samples[j].push(f(&s));
        }
    }

    // Successive-conditional chain.
    let n_chain = 6000;
    let mut chain_samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_chain); stats.len()];
    let mut state = draw_truth(&ctx0, &mut rng).unwrap();
    let mut ctx = ctx0.with_responses(gen_responses(&ctx0, &state, &mut rng)).unwrap();
    let mut cache = CorrCache::new();
    let mut mh = MhSet::new(&ctx0.config().mcmc.steps);
    for _ in 0..n_chain {
        mcmc::sweep(&ctx, &mut state, &mut cache, &mut mh, false, &mut rng).unwrap();
        ctx = ctx0.with_responses(gen_responses(&ctx0, &state, &mut rng)).unwrap();
        for (j, (_, f)) in stats.iter().enumerate() {
            chain_samples[j].push(f(&state));
        }
    }

    let mut failures = Vec::new();
    for (j, (name, _)) in stats.iter().enumerate() {
        let prior = batch_summary(&prior_samples[j], 20);
        let chain = batch_summary(&chain_samples[j], 20);
        let z = (prior.mean - chain.mean) / (prior.se * prior.se + chain.se * chain.se).sqrt();
        if z.abs() > 5.0 {
            failures.push(format!(
                "{name}: prior {:.4} vs chain {:.4} (z = {z:.2})",
                prior.mean, chain.mean
            ));
        }
    }
    assert!(
        failures.is_empty(),
        "joint-distribution test rejects:\n{}",
        failures.join("\n")
    );
}
