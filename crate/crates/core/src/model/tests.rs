use super::*;
use crate::numerics::finite_diff_check;

fn toy() -> Hypergraph {
    // node 6 isolated; nodes 0 and 5 are three hops apart
    Hypergraph::new(
        7,
        &[vec![0, 1], vec![1, 2, 3], vec![3, 4], vec![4, 5], vec![0, 2, 3]],
    )
    .unwrap()
}

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_in: 3,
        d_z: 4,
        d_p: 3,
        d_attn: 4,
        encoder_layers: 2,
        head_layers: 2,
        conv_layers: 1,
        attention_heads: 2,
        variant,
        counterfactual_interference: false,
    }
}

fn features(n: usize, d: usize) -> Tensor {
    Tensor::from_fn(n, d, |i, j| ((i * d + j) as f64 * 0.61).sin() + 0.2 * j as f64)
}

fn treatments(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7 + 3) % 5 < 3) as u8 as f64).collect()
}

#[test]
fn config_validation() {
    let mut c = small_config(Variant::Full);
    c.validate().unwrap();
    c.attention_heads = 0;
    assert!(c.validate().is_err());
    let mut c = small_config(Variant::Full);
    c.counterfactual_interference = true;
    c.conv_layers = 2;
    assert!(matches!(ModelParams::init(c, 1), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.label().parse::<Variant>().unwrap(), v);
    }
    assert!("gcn2".parse::<Variant>().is_err());
}

#[test]
fn graph_variant_has_no_attention_params() {
    let g = ModelParams::init(small_config(Variant::GraphConv), 1).unwrap();
    let f = ModelParams::init(small_config(Variant::Full), 1).unwrap();
    assert!(g.store().find("attention.0.proj").is_none());
    assert!(f.store().find("attention.1.vec").is_some());
    assert_eq!(
        f.store().num_scalars() - g.store().num_scalars(),
        2 * (4 * 4 + 8)
    );
}

#[test]
fn init_is_seeded_and_biases_start_at_zero() {
    let a = ModelParams::init(small_config(Variant::Full), 9).unwrap();
    let b = ModelParams::init(small_config(Variant::Full), 9).unwrap();
    let c = ModelParams::init(small_config(Variant::Full), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let bias = a.store().find("head1.0.bias").unwrap();
    assert!(a.store().get(bias).data().iter().all(|&v| v == 0.0));
    let w = a.store().find("encoder.0.weight").unwrap();
    let limit = (6.0f64 / 7.0).sqrt();
    assert!(a.store().get(w).data().iter().all(|v| v.abs() < limit));
}

#[test]
fn untreated_population_has_zero_interference() {
    let h = toy();
    let x = features(7, 3);
    for v in Variant::ALL {
        let params = ModelParams::init(small_config(v), 3).unwrap();
        let out = forward(&x, &[0.0; 7], &h, &params).unwrap();
        assert!(out.p.data().iter().all(|&p| p == 0.0), "{v}");
    }
}

#[test]
fn attention_normalizes_over_each_nodes_edges() {
    let h = toy();
    let params = ModelParams::init(small_config(Variant::Full), 5).unwrap();
    let z = encode_confounders(&features(7, 3), &params).unwrap();
    let a = attention_scores(&z, &h, &params).unwrap();
    assert_eq!(a.len(), h.nnz());
    for i in 0..7 {
        let r = h.node_entry_range(i);
        if r.is_empty() {
            continue;
        }
        let s: f64 = a[r.clone()].iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "node {i}: {s}");
        assert!(a[r].iter().all(|&w| w > 0.0));
    }
    let g = ModelParams::init(small_config(Variant::GraphConv), 5).unwrap();
    assert!(attention_scores(&z, &h, &g).is_err());
}

#[test]
fn outputs_are_permutation_equivariant() {
    let h = toy();
    let x = features(7, 3);
    let t = treatments(7);
    let perm = [3, 6, 0, 5, 1, 4, 2];
    let hp = h.permute_nodes(&perm);
    let mut xp = Tensor::zeros(7, 3);
    let mut tp = vec![0.0; 7];
    for i in 0..7 {
        xp.row_mut(perm[i]).copy_from_slice(x.row(i));
        tp[perm[i]] = t[i];
    }
    for v in Variant::ALL {
        let params = ModelParams::init(small_config(v), 11).unwrap();
        let a = forward(&x, &t, &h, &params).unwrap();
        let b = forward(&xp, &tp, &hp, &params).unwrap();
        for i in 0..7 {
            assert!((a.yhat1[i] - b.yhat1[perm[i]]).abs() < 1e-12, "{v}");
            assert!((a.yhat0[i] - b.yhat0[perm[i]]).abs() < 1e-12, "{v}");
        }
    }
}

fn perturbation_reaches(variant: Variant, target: usize, source: usize) -> bool {
    let h = toy();
    let x = features(7, 3);
    let t = vec![1.0; 7];
    let params = ModelParams::init(small_config(variant), 17).unwrap();
    let base = forward(&x, &t, &h, &params).unwrap();
    let mut x2 = x.clone();
    for v in x2.row_mut(source) {
        *v += 0.75;
    }
    let moved = forward(&x2, &t, &h, &params).unwrap();
    (base.yhat1[target] - moved.yhat1[target]).abs() > 1e-12
}

#[test]
fn graph_convolution_is_one_hop_local() {
    // 0's neighbourhood is {1, 2, 3}
    assert!(perturbation_reaches(Variant::GraphConv, 0, 3));
    assert!(!perturbation_reaches(Variant::GraphConv, 0, 4));
    assert!(!perturbation_reaches(Variant::GraphConv, 0, 5));
    assert!(!perturbation_reaches(Variant::GraphConv, 0, 6));
}

#[test]
fn attention_convolution_reaches_two_hops_only() {
    // a neighbour's attention is normalized over its own edges, whose
    // members sit two hops away
    assert!(perturbation_reaches(Variant::Full, 0, 4));
    assert!(!perturbation_reaches(Variant::Full, 0, 5));
    assert!(!perturbation_reaches(Variant::Full, 0, 6));
    assert!(!perturbation_reaches(Variant::Full, 6, 0));
}

#[test]
fn isolated_node_sees_no_interference() {
    let h = toy();
    let params = ModelParams::init(small_config(Variant::Full), 2).unwrap();
    let out = forward(&features(7, 3), &[1.0; 7], &h, &params).unwrap();
    assert!(out.p.row(6).iter().all(|&v| v == 0.0));
}

#[test]
fn two_node_forward_matches_hand_computation() {
    let h = Hypergraph::new(2, &[vec![0, 1]]).unwrap();
    let cfg = ModelConfig {
        d_in: 1,
        d_z: 1,
        d_p: 1,
        d_attn: 1,
        encoder_layers: 1,
        head_layers: 1,
        conv_layers: 1,
        attention_heads: 1,
        variant: Variant::Full,
        counterfactual_interference: false,
    };
    let mut params = ModelParams::init(cfg, 0).unwrap();
    let mut set = |name: &str, vals: &[f64]| {
        let id = params.store().find(name).unwrap();
        params.store_mut().get_mut(id).data_mut().copy_from_slice(vals);
    };
    set("encoder.0.weight", &[2.0]);
    set("encoder.0.bias", &[0.5]);
    set("conv.0.weight", &[-3.0]);
    set("head1.0.weight", &[1.0, 4.0]);
    set("head1.0.bias", &[0.25]);
    set("head0.0.weight", &[-1.0, 2.0]);
    set("head0.0.bias", &[0.0]);
    let x = Tensor::column(vec![1.0, -1.0]);
    let t = [1.0, 0.0];
    let out = forward(&x, &t, &h, &params).unwrap();

    // z = (2.5, -1.5); one edge of size two, so the operator is 1/2 everywhere
    let z = [2.5, -1.5];
    let pre = 0.5 * (t[0] * z[0] + t[1] * z[1]) * -3.0;
    let p = if pre > 0.0 { pre } else { 0.01 * pre };
    for i in 0..2 {
        assert!((out.p.get(i, 0) - p).abs() < 1e-14);
        assert!((out.yhat1[i] - (z[i] + 4.0 * p + 0.25)).abs() < 1e-14);
        assert!((out.yhat0[i] - (-z[i] + 2.0 * p)).abs() < 1e-14);
    }
    assert_eq!(out.attention.as_deref(), Some(&[1.0, 1.0][..]));
    assert_eq!(out.observed_prediction(&t), vec![out.yhat1[0], out.yhat0[1]]);
}

#[test]
fn counterfactual_interference_flips_own_mask() {
    let h = toy();
    let x = features(7, 3);
    let t = treatments(7);
    for v in [Variant::Full, Variant::GraphConv] {
        let mut cfg = small_config(v);
        cfg.counterfactual_interference = true;
        let params = ModelParams::init(cfg, 21).unwrap();
        let out = forward(&x, &t, &h, &params).unwrap();
        // for node i, the treated-arm prediction must equal the shared-P
        // prediction made with t_i forced to one
        for i in 0..7 {
            let mut t1 = t.clone();
            t1[i] = 1.0;
            let mut shared = params.clone();
            let mut c2 = cfg;
            c2.counterfactual_interference = false;
            shared.config = c2;
            let forced = forward(&x, &t1, &h, &shared).unwrap();
            assert!((out.yhat1[i] - forced.yhat1[i]).abs() < 1e-12, "{v} node {i}");
            let mut t0 = t.clone();
            t0[i] = 0.0;
            let forced = forward(&x, &t0, &h, &shared).unwrap();
            assert!((out.yhat0[i] - forced.yhat0[i]).abs() < 1e-12, "{v} node {i}");
        }
    }
}

#[test]
fn decomposed_calls_agree_with_forward() {
    let h = toy();
    let x = features(7, 3);
    let t = treatments(7);
    for v in Variant::ALL {
        let params = ModelParams::init(small_config(v), 4).unwrap();
        let out = forward(&x, &t, &h, &params).unwrap();
        let z = encode_confounders(&x, &params).unwrap();
        assert_eq!(z, out.z);
        let p = interference_forward(&z, &t, &h, &params).unwrap();
        assert!(p.max_abs_diff(&out.p) < 1e-14);
        let (y1, y0) = predict_outcomes(&z, &p, &params).unwrap();
        assert_eq!(y1, out.yhat1);
        assert_eq!(y0, out.yhat0);
        let ite = estimate_ite(&out);
        assert!((ite[2] - (y1[2] - y0[2])).abs() < 1e-15);
    }
    let e = hyperedge_repr(&features(7, 4), &h).unwrap();
    assert_eq!(e.shape(), (5, 4));
}

#[test]
fn shape_errors() {
    let h = toy();
    let params = ModelParams::init(small_config(Variant::Full), 4).unwrap();
    assert!(matches!(
        forward(&features(6, 3), &[1.0; 6], &h, &params),
        Err(ModelError::ShapeMismatch(_))
    ));
    assert!(forward(&features(7, 2), &[1.0; 7], &h, &params).is_err());
    assert!(forward(&features(7, 3), &[0.5; 7], &h, &params).is_err());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let h = toy();
    let x = features(7, 3);
    let t: Arc<[f64]> = treatments(7).into();
    let y: Vec<f64> = (0..7).map(|i| (i as f64 * 0.4).cos()).collect();
    for v in [Variant::Full, Variant::GraphConv] {
        let mut cfg = small_config(v);
        cfg.d_z = 3;
        cfg.d_p = 2;
        cfg.d_attn = 2;
        let template = ModelParams::init(cfg, 8).unwrap();
        let structure = Interference::build(&h, v);
        let values: Vec<Tensor> = template.store().ids().map(|id| template.store().get(id).clone()).collect();
        let err = finite_diff_check(
            |tape, vars| {
                let bound = BoundParams {
                    params: &template,
                    vars: vars.to_vec(),
                };
                let fv = forward_on_tape(tape, &bound, &x, &t, &structure)
                    .map_err(|e| NumericsError::ShapeMismatch(e.to_string()))?;
                let target = tape.constant(Tensor::column(y.clone()));
                let d1 = tape.sub(fv.yhat1, target)?;
                let d0 = tape.sub(fv.yhat0, target)?;
                let a = tape.sum_squares(d1);
                let b = tape.sum_squares(d0);
                tape.add(a, b)
            },
            &values,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{v}: {err}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    let params = ModelParams::init(small_config(Variant::ProjectedHyper), 6).unwrap();
    save_checkpoint(&params, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, params);

    let mut ck = Checkpoint::from(&params);
    ck.params[0].rows += 1;
    assert!(ModelParams::try_from(ck).is_err());
    let mut ck = Checkpoint::from(&params);
    ck.format_version = 7;
    assert!(ModelParams::try_from(ck).is_err());
}
