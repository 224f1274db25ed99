use paramnet_core::layers::{
    check_param_gradients, load_balancing_loss, swiglu_ffn_forward, top1, ConvSpec, Conv2d, Dispatch,
    DynamicConvLayer, GhostModule, MoEFfnLayer, MoeConfig, MoePlacement, ParamStore, RepConvLayer,
    RepMode, SwiGluFfn,
};
use paramnet_core::{Error, Prng, Tape, Tensor, Var};
use proptest::prelude::*;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;

fn probe<'t>(y: Var<'t>, seed: u64) -> paramnet_core::Result<Var<'t>> {
    let mut rng = Prng::new(seed).split("probe");
    let c = y.tape().constant(rng.normal_tensor(y.shape(), 1.0));
    Ok(y.mul(c)?.sum())
}

fn randomize(store: &mut ParamStore, rng: &mut Prng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().clone();
        *store.get_mut(id) = rng.normal_tensor(shape, std);
    }
}

fn plain_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .conv2d(
            tape.constant(w.clone()),
            b.map(|b| tape.constant(b.clone())),
            spec.stride,
            spec.padding,
            spec.groups,
        )
        .unwrap();
    (*y.value()).clone()
}

fn dynamic_out(layer: &DynamicConvLayer, store: &ParamStore, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    (*layer.forward(&p, tape.constant(x.clone())).unwrap().value()).clone()
}

#[test]
fn dynamic_single_expert_is_standard_conv() {
    let spec = ConvSpec::new(3, 4, 3).with_bias(true);
    for seed in 0..20 {
        let mut rng = Prng::new(seed);
        let mut store = ParamStore::new();
        let layer = DynamicConvLayer::new(&mut store, "dc", spec, 1, &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.5);
        let x = rng.normal_tensor([2, 3, 6, 6], 1.0);

        let w = store.get(layer.experts).reshape(spec.weight_shape()).unwrap();
        let b = store.get(layer.expert_biases.unwrap()).reshape([4]).unwrap();
        let expected = plain_conv(&x, &w, Some(&b), &spec);
        assert!(dynamic_out(&layer, &store, &x).max_abs_diff(&expected) <= 1e-10);

        // Backward: gradients w.r.t. input and expert weight equal plain conv's.
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.leaf(x.clone());
        let loss = probe(layer.forward(&p, xv).unwrap(), seed).unwrap();
        tape.backward(loss).unwrap();
        let gx_dyn = tape.grad(xv).unwrap();
        let gw_dyn = tape.grad_or_zeros(p.get(layer.experts)).reshape(spec.weight_shape()).unwrap();

        let tape2 = Tape::new();
        let xv2 = tape2.leaf(x.clone());
        let wv2 = tape2.leaf(w.clone());
        let y = xv2.conv2d(wv2, Some(tape2.constant(b.clone())), 1, 1, 1).unwrap();
        tape2.backward(probe(y, seed).unwrap()).unwrap();
        assert!(gx_dyn.max_abs_diff(&tape2.grad(xv2).unwrap()) <= 1e-10);
        assert!(gw_dyn.max_abs_diff(&tape2.grad(wv2).unwrap()) <= 1e-10);
    }
}

#[test]
fn dynamic_identical_experts_is_standard_conv() {
    let spec = ConvSpec::new(4, 2, 3);
    let mut rng = Prng::new(11);
    let mut store = ParamStore::new();
    let layer = DynamicConvLayer::new(&mut store, "dc", spec, 4, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.7);
    let w = rng.normal_tensor(spec.weight_shape(), 1.0);
    *store.get_mut(layer.experts) = Tensor::stack(&vec![w.clone(); 4]).unwrap();
    for _ in 0..5 {
        let x = rng.normal_tensor([3, 4, 5, 5], 1.0);
        let expected = plain_conv(&x, &w, None, &spec);
        assert!(dynamic_out(&layer, &store, &x).max_abs_diff(&expected) <= 1e-12);
    }
}

#[test]
fn dynamic_zero_router_is_mean_expert() {
    let spec = ConvSpec::new(4, 6, 3).with_stride(2);
    for seed in 0..20 {
        let mut rng = Prng::new(50 + seed);
        let mut store = ParamStore::new();
        let layer = DynamicConvLayer::new(&mut store, "dc", spec, 4, &mut rng).unwrap();
        // Fresh layer: w2, b2 are zero. Randomise only the expert bank and w1.
        *store.get_mut(layer.experts) = rng.normal_tensor([4, 6, 4, 3, 3], 1.0);
        *store.get_mut(layer.router.w1) = rng.normal_tensor([4, 4], 1.0);
        let x = rng.normal_tensor([2, 4, 7, 7], 1.0);

        // Oracle: average the experts explicitly, then convolve.
        let bank = store.get(layer.experts);
        let mut mean = Tensor::zeros(spec.weight_shape());
        for i in 0..4 {
            mean.add_assign(&bank.index_axis0(i));
        }
        let mean = mean.scale(0.25);
        let expected = plain_conv(&x, &mean, None, &spec);
        assert!(dynamic_out(&layer, &store, &x).max_abs_diff(&expected) <= 1e-12);
    }
}

#[test]
fn dynamic_coefficients_are_a_distribution_per_sample() {
    let spec = ConvSpec::new(5, 3, 1);
    let mut rng = Prng::new(3);
    let mut store = ParamStore::new();
    let layer = DynamicConvLayer::new(&mut store, "dc", spec, 8, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 1.0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let alpha = layer
        .coefficients(&p, tape.constant(rng.normal_tensor([4, 5, 3, 3], 2.0)))
        .unwrap()
        .value();
    assert_eq!(alpha.dims(), &[4, 8]);
    for row in alpha.data().chunks(8) {
        assert!(row.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn dynamic_errors() {
    let mut store = ParamStore::new();
    let mut rng = Prng::new(0);
    assert!(matches!(
        DynamicConvLayer::new(&mut store, "z", ConvSpec::new(2, 2, 1), 0, &mut rng),
        Err(Error::Validation { .. })
    ));
    let layer = DynamicConvLayer::new(&mut store, "dc", ConvSpec::new(2, 2, 1), 2, &mut rng).unwrap();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    assert!(matches!(
        layer.forward(&p, tape.constant(Tensor::zeros([1, 3, 2, 2]))),
        Err(Error::ShapeMismatch { axis: 1, expected: 2, got: 3, .. })
    ));
}

#[test]
fn dynamic_param_count_by_enumeration() {
    let spec = ConvSpec::new(8, 16, 3).with_bias(true);
    let mut store = ParamStore::new();
    let layer = DynamicConvLayer::new(&mut store, "dc", spec, 4, &mut Prng::new(0)).unwrap();
    let (rw, rb) = layer.router.param_counts();
    assert_eq!(
        store.num_elements(),
        4 * (spec.weight_numel() + spec.bias_numel()) + rw + rb
    );
}

#[test]
fn gradients_of_every_layer() {
    for seed in 0..20u64 {
        let mut rng = Prng::new(1000 + seed);

        // conv and grouped conv
        for groups in [1, 2] {
            let mut store = ParamStore::new();
            let spec = ConvSpec::new(4, 6, 3).with_groups(groups).with_bias(true);
            let conv = Conv2d::new(&mut store, "c", spec, &mut rng).unwrap();
            randomize(&mut store, &mut rng, 0.5);
            let x = rng.normal_tensor([2, 4, 5, 5], 1.0);
            let reports = check_param_gradients(
                &store,
                |t, p| probe(conv.forward(p, t.constant(x.clone()))?, seed),
                FD_STEP,
                None,
                seed,
            )
            .unwrap();
            for (name, r) in reports {
                assert!(r.max_rel_error <= FD_TOL, "conv g{groups} {name} seed {seed}: {r:?}");
            }
        }

        // dynamic conv including the router path
        let mut store = ParamStore::new();
        let spec = ConvSpec::new(3, 4, 3).with_bias(true);
        let dc = DynamicConvLayer::new(&mut store, "dc", spec, 4, &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.5);
        let x = rng.normal_tensor([2, 3, 5, 5], 1.0);
        let reports = check_param_gradients(
            &store,
            |t, p| probe(dc.forward(p, t.constant(x.clone()))?, seed),
            FD_STEP,
            None,
            seed,
        )
        .unwrap();
        for (name, r) in reports {
            assert!(r.max_rel_error <= FD_TOL, "dynamic {name} seed {seed}: {r:?}");
        }
        let r = paramnet_core::tensor::check_gradients(
            |t, v| probe(dc.forward(&store.bind_frozen(t), v)?, seed),
            &x,
            FD_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error <= FD_TOL, "dynamic input seed {seed}: {r:?}");

        // ghost module
        let mut store = ParamStore::new();
        let gm = GhostModule::new(&mut store, "g", 3, 6, true, true, Some(2), &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.5);
        let x = rng.normal_tensor([2, 3, 4, 4], 1.0);
        let reports = check_param_gradients(
            &store,
            |t, p| probe(gm.forward(p, t.constant(x.clone()))?, seed),
            FD_STEP,
            None,
            seed,
        )
        .unwrap();
        for (name, r) in reports {
            assert!(r.max_rel_error <= FD_TOL, "ghost {name} seed {seed}: {r:?}");
        }

        // SwiGLU
        let mut store = ParamStore::new();
        let ffn = SwiGluFfn::new(&mut store, "ffn", 4, 6, &mut rng);
        let x = rng.normal_tensor([3, 4], 1.0);
        let reports = check_param_gradients(
            &store,
            |t, p| probe(ffn.forward(p, t.constant(x.clone()))?, seed),
            FD_STEP,
            None,
            seed,
        )
        .unwrap();
        for (name, r) in reports {
            assert!(r.max_rel_error <= FD_TOL, "swiglu {name} seed {seed}: {r:?}");
        }

        // MoE with a single expert, output and aux loss
        for placement in MoePlacement::ALL {
            let mut store = ParamStore::new();
            let moe = MoEFfnLayer::new(
                &mut store,
                "moe",
                4,
                6,
                MoeConfig::new(1, placement),
                &mut rng,
            )
            .unwrap();
            let x = rng.normal_tensor([5, 4], 1.0);
            let reports = check_param_gradients(
                &store,
                |t, p| {
                    let out = moe.forward(p, t.constant(x.clone()))?;
                    probe(out.y, seed)?.add(out.aux_loss.scale(0.3))
                },
                FD_STEP,
                None,
                seed,
            )
            .unwrap();
            for (name, r) in reports {
                assert!(r.max_rel_error <= FD_TOL, "moe {placement} {name} seed {seed}: {r:?}");
            }
        }
    }
}

#[test]
fn repconv_single_branch_is_conv() {
    let spec = ConvSpec::new(3, 4, 3);
    let mut rng = Prng::new(5);
    let mut store = ParamStore::new();
    let rep = RepConvLayer::new(&mut store, "r", spec, vec![1.0], &mut rng).unwrap();
    let x = rng.normal_tensor([2, 3, 6, 6], 1.0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let y = rep.forward(&p, tape.constant(x.clone()), RepMode::Train).unwrap().value();
    assert_eq!(*y, plain_conv(&x, store.get(rep.branches[0]), None, &spec));
}

#[test]
fn repconv_fold_equivalence() {
    let spec = ConvSpec::new(4, 5, 3).with_bias(true);
    let mut rng = Prng::new(6);
    let mut store = ParamStore::new();
    let mut rep = RepConvLayer::new(&mut store, "r", spec, vec![1.0, 0.5, -0.7, 2.0], &mut rng).unwrap();
    randomize(&mut store, &mut rng, 1.0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    assert!(matches!(
        rep.forward(&p, tape.constant(Tensor::zeros([1, 4, 3, 3])), RepMode::Folded),
        Err(Error::State(_))
    ));
    rep.fold_branches(&store);
    for _ in 0..20 {
        let x = tape.constant(rng.normal_tensor([2, 4, 6, 6], 1.0));
        let train = rep.forward(&p, x, RepMode::Train).unwrap().value();
        let folded = rep.forward(&p, x, RepMode::Folded).unwrap().value();
        assert!(train.max_abs_diff(&folded) <= 1e-10);
    }
    assert_eq!(
        rep.inference_param_count(),
        Some(spec.weight_numel() + spec.bias_numel())
    );
    assert_eq!(store.num_elements(), 4 * (spec.weight_numel() + spec.bias_numel()));
}

#[test]
fn repconv_fold_linearity() {
    let spec = ConvSpec::new(2, 2, 3);
    let mut rng = Prng::new(7);
    let w = rng.normal_tensor(spec.weight_shape(), 1.0);

    let mut store = ParamStore::new();
    let mut rep = RepConvLayer::new(&mut store, "r", spec, vec![1.0, 1.0], &mut rng).unwrap();
    *store.get_mut(rep.branches[0]) = w.clone();
    *store.get_mut(rep.branches[1]) = w.scale(-1.0);
    rep.fold_branches(&store);
    assert!(rep.folded_weight().unwrap().data().iter().all(|&v| v == 0.0));
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let y = rep
        .forward(&p, tape.constant(rng.normal_tensor([1, 2, 4, 4], 1.0)), RepMode::Folded)
        .unwrap()
        .value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut store = ParamStore::new();
    let mut rep = RepConvLayer::new(&mut store, "r", spec, vec![2.0, 3.0], &mut rng).unwrap();
    *store.get_mut(rep.branches[0]) = w.clone();
    *store.get_mut(rep.branches[1]) = w.clone();
    rep.fold_branches(&store);
    assert!(rep.folded_weight().unwrap().max_abs_diff(&w.scale(5.0)) <= 1e-15);
}

#[test]
fn ghost_identity_kernels() {
    let mut rng = Prng::new(8);
    let mut store = ParamStore::new();
    let gm = GhostModule::new(&mut store, "g", 1, 2, false, false, None, &mut rng).unwrap();
    *store.get_mut(gm.cheap.weight) =
        Tensor::from_vec([1, 1, 3, 3], vec![0., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
    let primary_w = match &gm.primary {
        paramnet_core::layers::ConvUnit::Static(c) => c.weight,
        _ => unreachable!(),
    };
    *store.get_mut(primary_w) = Tensor::ones([1, 1, 1, 1]);
    let x = rng.normal_tensor([2, 1, 4, 5], 1.0);
    let tape = Tape::new();
    let y = gm.forward(&store.bind_frozen(&tape), tape.constant(x.clone())).unwrap().value();
    assert_eq!(y.dims(), &[2, 2, 4, 5]);
    for b in 0..2 {
        let yb = y.index_axis0(b);
        assert_eq!(yb.index_axis0(0), x.index_axis0(b).index_axis0(0));
        assert_eq!(yb.index_axis0(1), yb.index_axis0(0));
    }
}

#[test]
fn ghost_matches_compositional_oracle() {
    let mut rng = Prng::new(9);
    for (c_in, c_out) in [(3, 8), (8, 4), (5, 10)] {
        let mut store = ParamStore::new();
        let gm = GhostModule::new(&mut store, "g", c_in, c_out, true, true, None, &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.5);
        let x = rng.normal_tensor([2, c_in, 5, 5], 1.0);
        let tape = Tape::new();
        let y = gm.forward(&store.bind_frozen(&tape), tape.constant(x.clone())).unwrap().value();
        assert_eq!(y.dims()[1], c_out);

        // Separate conv2d + grouped conv2d + concat calls.
        let get = |name: &str| store.get(store.find(name).unwrap()).clone();
        let t2 = Tape::new();
        let c = |t: Tensor| t2.constant(t);
        let primary = c(x)
            .conv2d(c(get("g.primary.weight")), Some(c(get("g.primary.bias"))), 1, 0, 1)
            .unwrap()
            .relu();
        let cheap = primary
            .conv2d(c(get("g.cheap.weight")), Some(c(get("g.cheap.bias"))), 1, 1, c_out / 2)
            .unwrap()
            .relu();
        let oracle = t2.concat(&[primary, cheap], 1).unwrap().value();
        assert_eq!(y.max_abs_diff(&oracle), 0.0);
    }
}

#[test]
fn ghost_rejects_odd_channels() {
    let mut store = ParamStore::new();
    assert!(matches!(
        GhostModule::new(&mut store, "g", 4, 5, true, false, None, &mut Prng::new(0)),
        Err(Error::Validation { .. })
    ));
}

#[test]
fn swiglu_examples() {
    let tape = Tape::new();
    let mut rng = Prng::new(10);
    let c = |t: Tensor| tape.constant(t);
    let y = swiglu_ffn_forward(
        c(Tensor::zeros([3, 4])),
        c(rng.normal_tensor([4, 5], 1.0)),
        c(rng.normal_tensor([4, 5], 1.0)),
        c(rng.normal_tensor([5, 4], 1.0)),
    )
    .unwrap()
    .value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let one = || c(Tensor::ones([1, 1]));
    let y = swiglu_ffn_forward(c(Tensor::full([1, 1], 2.0)), one(), one(), one())
        .unwrap()
        .value()
        .item();
    // silu(2) * 2 = 2 * sigmoid(2) * 2, evaluated by hand.
    let expected = 4.0 / (1.0 + (-2.0f64).exp());
    assert!((y - expected).abs() < 1e-15);
    assert!((y - 3.5232).abs() < 1e-4);

    assert!(swiglu_ffn_forward(
        c(Tensor::zeros([1, 4])),
        c(Tensor::zeros([4, 5])),
        c(Tensor::zeros([4, 6])),
        c(Tensor::zeros([5, 4]))
    )
    .is_err());
}

fn moe_layer(n: usize, placement: MoePlacement, cf: f64, seed: u64) -> (ParamStore, MoEFfnLayer) {
    let mut store = ParamStore::new();
    let mut cfg = MoeConfig::new(n, placement);
    cfg.capacity_factor = cf;
    let layer = MoEFfnLayer::new(&mut store, "moe", 8, 12, cfg, &mut Prng::new(seed)).unwrap();
    (store, layer)
}

#[test]
fn moe_uniform_router_sends_everything_to_expert_zero() {
    let (mut store, layer) = moe_layer(4, MoePlacement::UpProj, 4.0, 1);
    *store.get_mut(layer.router_w) = Tensor::zeros([8, 4]);
    let tape = Tape::new();
    let x = tape.constant(Prng::new(2).normal_tensor([10, 8], 1.0));
    let out = layer.forward(&store.bind_frozen(&tape), x).unwrap();
    assert_eq!(out.stats.dispatch_fraction, vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(out.stats.mean_prob, vec![0.25; 4]);
    assert_eq!(out.stats.dropped, 0);
    assert_eq!(out.stats.expert_load, vec![10, 0, 0, 0]);
    assert!((out.aux_loss.value().item() - 1.0).abs() <= 1e-12);
}

#[test]
fn moe_even_one_hot_routing_has_unit_aux_loss() {
    // x_t = 50 · e_{t mod 4}; router = identity on the first 4 features, so
    // router probabilities are one-hot to within exp(-50).
    let n = 4;
    let (mut store, layer) = moe_layer(n, MoePlacement::Gate, 1.0, 3);
    let mut router = Tensor::zeros([8, n]);
    for i in 0..n {
        router.data_mut()[i * n + i] = 1.0;
    }
    *store.get_mut(layer.router_w) = router;
    let mut x = Tensor::zeros([8, 8]);
    for t in 0..8 {
        x.data_mut()[t * 8 + t % n] = 50.0;
    }
    let tape = Tape::new();
    let out = layer.forward(&store.bind_frozen(&tape), tape.constant(x)).unwrap();
    assert_eq!(out.stats.expert_load, vec![2; 4]);
    assert_eq!(out.stats.dropped, 0);
    assert!((out.aux_loss.value().item() - 1.0).abs() <= 1e-9);
    assert!((load_balancing_loss(&[0.25; 4], &[0.25; 4]) - 1.0).abs() <= 1e-15);
}

#[test]
fn moe_single_expert_is_dense_ffn() {
    for placement in MoePlacement::ALL {
        let (store, layer) = moe_layer(1, placement, 1.0, 4);
        let x = Prng::new(5).normal_tensor([7, 8], 1.0);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = layer.forward(&p, tape.constant(x.clone())).unwrap();
        assert_eq!(out.stats.dropped, 0);
        let dense = swiglu_ffn_forward(
            tape.constant(x),
            p.get(layer.gate[0]),
            p.get(layer.up[0]),
            p.get(layer.down[0]),
        )
        .unwrap()
        .value();
        assert!(out.y.value().max_abs_diff(&dense) <= 1e-12);
    }
}

#[test]
fn moe_drops_overflow_tokens_to_zero() {
    let (mut store, layer) = moe_layer(4, MoePlacement::DownProj, 1.0, 6);
    *store.get_mut(layer.router_w) = Tensor::zeros([8, 4]);
    let tape = Tape::new();
    let out = layer
        .forward(&store.bind_frozen(&tape), tape.constant(Prng::new(7).normal_tensor([8, 8], 1.0)))
        .unwrap();
    // All tokens pick expert 0; capacity ceil(8/4) = 2.
    assert_eq!(out.stats.capacity, 2);
    assert_eq!(out.stats.expert_load, vec![2, 0, 0, 0]);
    assert_eq!(out.stats.dropped, 6);
    let y = out.y.value();
    for t in 2..8 {
        assert!(y.data()[t * 8..(t + 1) * 8].iter().all(|&v| v == 0.0));
    }
    assert!(y.data()[..16].iter().any(|&v| v != 0.0));
}

#[test]
fn moe_errors() {
    let (store, layer) = moe_layer(2, MoePlacement::UpProj, 1.0, 8);
    let tape = Tape::new();
    assert!(matches!(
        layer.forward(&store.bind_frozen(&tape), tape.constant(Tensor::zeros([3, 7]))),
        Err(Error::ShapeMismatch { axis: 1, expected: 8, got: 7, .. })
    ));
    let mut cfg = MoeConfig::new(2, MoePlacement::Gate);
    cfg.capacity_factor = 0.0;
    let mut s = ParamStore::new();
    assert!(MoEFfnLayer::new(&mut s, "m", 4, 4, cfg, &mut Prng::new(0)).is_err());
}

proptest! {
    #[test]
    fn moe_token_conservation(seed in 0u64..10_000, tokens in 1usize..24, n in 1usize..6, cf in 0.3f64..3.0) {
        let (store, layer) = moe_layer(n, MoePlacement::UpProj, cf, seed);
        let tape = Tape::new();
        let x = tape.constant(Prng::new(seed ^ 0xabc).normal_tensor([tokens, 8], 1.0));
        let out = layer.forward(&store.bind_frozen(&tape), x).unwrap();
        prop_assert_eq!(out.stats.kept + out.stats.dropped, tokens);
        prop_assert_eq!(out.stats.expert_load.iter().sum::<usize>(), out.stats.kept);
        prop_assert!(out.stats.expert_load.iter().all(|&l| l <= out.stats.capacity));
    }

    #[test]
    fn each_kept_token_has_one_expert(choice in proptest::collection::vec(0usize..5, 1..40), cap in 0usize..10) {
        let d = Dispatch::new(choice.clone(), 5, cap);
        let mut seen = vec![0usize; choice.len()];
        for (e, toks) in d.kept.iter().enumerate() {
            for &t in toks {
                prop_assert_eq!(choice[t], e);
                seen[t] += 1;
            }
        }
        for &t in &d.dropped {
            seen[t] += 1;
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn one_hot_aux_loss_is_at_least_one(choice in proptest::collection::vec(0usize..6, 1..50)) {
        let n = 6;
        let d = Dispatch::new(choice.clone(), n, usize::MAX);
        let f = d.dispatch_fractions(n);
        // One-hot probabilities: mean probability equals dispatch fraction.
        let aux = load_balancing_loss(&f, &f);
        prop_assert!(aux >= 1.0 - 1e-9);
    }

    #[test]
    fn skewed_routing_aux_loss(n in 2usize..8, target in 0usize..8, raw in proptest::collection::vec(0.01f64..1.0, 8)) {
        let target = target % n;
        let total: f64 = raw[..n].iter().sum();
        let p: Vec<f64> = raw[..n].iter().map(|v| v / total).collect();
        let mut f = vec![0.0; n];
        f[target] = 1.0;
        let aux = load_balancing_loss(&f, &p);
        prop_assert!((aux - n as f64 * p[target]).abs() < 1e-12);
    }

    #[test]
    fn argmax_invariant_under_positive_scaling(logits in proptest::collection::vec(-5.0f64..5.0, 12), scale in 0.01f64..50.0) {
        let tape = Tape::new();
        let l = Tensor::from_vec([3, 4], logits).unwrap();
        let p1 = tape.constant(l.clone()).softmax(1).unwrap().value();
        let p2 = tape.constant(l.scale(scale)).softmax(1).unwrap().value();
        prop_assert_eq!(top1(&p1), top1(&p2));
        prop_assert_eq!(top1(&p1), top1(&l));
    }
}
