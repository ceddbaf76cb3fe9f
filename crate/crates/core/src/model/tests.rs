use super::*;
use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

fn pcn(paths: usize, variant: PathVariant, recon: bool) -> NetworkSpec {
    NetworkSpec {
        reconstruction: recon,
        ..NetworkSpec::path_caps(paths, variant, RoutingMode::FanIn)
    }
}

fn image(seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, "test-image", 0);
    Tensor::new(&[1, 1, 28, 28], (0..784).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

#[test]
fn published_parameter_counts() {
    let t2 = PathVariant::Table2Matched;
    assert_eq!(count_parameters(&pcn(5, t2, false)).total(), 683_320);
    assert_eq!(count_parameters(&pcn(10, t2, false)).total(), 1_366_640);
    let c = count_parameters(&pcn(10, t2, true));
    assert_eq!((c.features, c.routing, c.decoder), (739_440, 627_200, 1_411_344));
    assert_eq!(c.total(), 2_777_984);
    let c = count_parameters(&pcn(16, t2, true));
    assert_eq!((c.features, c.routing, c.decoder), (1_183_104, 1_003_520, 1_411_344));
    assert_eq!(c.total(), 3_597_968);
    assert_eq!(count_parameters(&pcn(5, PathVariant::Table1Literal, false)).total(), 579_560);

    let mut base = NetworkSpec::baseline(RoutingMode::FanOut);
    let c = count_parameters(&base);
    assert_eq!((c.features, c.routing), (20_992 + 5_308_672, 1_474_560));
    assert_eq!(c.total(), 6_804_224);
    base.reconstruction = true;
    assert_eq!(count_parameters(&base).total(), 8_215_568);
}

#[test]
fn closed_form_count_matches_allocation() {
    let mut specs = vec![NetworkSpec::baseline(RoutingMode::FanIn)];
    for paths in [1, 2, 5] {
        for variant in [PathVariant::Table1Literal, PathVariant::Table2Matched] {
            for recon in [false, true] {
                specs.push(pcn(paths, variant, recon));
            }
        }
    }
    for spec in specs {
        let params = ModelParams::zeros_for(&spec);
        assert_eq!(params.scalar_count(), count_parameters(&spec).total(), "{spec:?}");
        params.check_matches(&spec).unwrap();
        assert_eq!(params.get("decoder.fc1.weight").is_some(), spec.reconstruction);
    }
}

#[test]
fn init_is_seeded_and_shaped() {
    let spec = pcn(2, PathVariant::Table2Matched, true);
    assert_eq!(init_params(&spec), init_params(&spec));
    let other = NetworkSpec { seed: 1, ..spec.clone() };
    assert_ne!(init_params(&spec), init_params(&other));
    let params = init_params(&spec);
    for (name, t) in params.iter() {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    let w = params.get("path0.conv1.weight").unwrap();
    let bound = 1.0 / (16.0f64 * 81.0).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn transform_init_moments() {
    // Fan-in: N(0, 1) over 627,200 entries.
    let params = init_params(&pcn(10, PathVariant::Table2Matched, false));
    let w = params.get("digitcaps.weight").unwrap().data();
    assert!(w.len() >= 100_000);
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");

    let fan_out = NetworkSpec {
        routing: RoutingMode::FanOut,
        ..pcn(10, PathVariant::Table2Matched, false)
    };
    let params = init_params(&fan_out);
    let w = params.get("digitcaps.weight").unwrap().data();
    let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
    assert!((var - 0.04).abs() < 0.002, "variance {var}");
}

#[test]
fn single_path_one_iteration_is_uniform_average() {
    let spec = NetworkSpec {
        iterations: 1,
        ..pcn(1, PathVariant::Table1Literal, false)
    };
    let params = init_params(&spec);
    let img = image(1);

    let mut g = Graph::new();
    let bound = params.bind_constant(&mut g);
    let x = g.constant(img.clone());
    let out = forward(&mut g, &spec, &bound, x, None).unwrap();
    let v = g.value(out.digit_caps.var).clone();

    // Rebuild the primaries and predictions, then average them by hand.
    let path = spec.path_spec().unwrap();
    let convs = (0..path.conv_shapes().len())
        .map(|l| {
            (
                bound.var(&format!("path0.conv{l}.weight")).unwrap(),
                bound.var(&format!("path0.conv{l}.bias")).unwrap(),
            )
        })
        .collect();
    let map = paths::path_forward(&mut g, &path, &PathParams { convs }, x).unwrap();
    let primary = paths::assemble_primary(&mut g, &[map]).unwrap();
    let uhat = g.predict(primary.var, bound.var("digitcaps.weight").unwrap()).unwrap();
    let u = g.value(uhat).data().to_vec();
    let n = 49;
    let mut s = vec![0.0; NUM_DIGITS * DIGIT_DIM];
    for i in 0..n {
        for k in 0..NUM_DIGITS * DIGIT_DIM {
            s[k] += u[i * NUM_DIGITS * DIGIT_DIM + k] / n as f64;
        }
    }
    let sv = g.constant(Tensor::new(&[1, NUM_DIGITS, DIGIT_DIM], s).unwrap());
    let expect = g.squash(sv).unwrap();
    assert!(v.max_abs_diff(g.value(expect)) < 1e-12);
}

#[test]
fn eval_forward_is_deterministic_and_bounded() {
    let spec = pcn(2, PathVariant::Table2Matched, true);
    let params = init_params(&spec);
    let run = || {
        let mut g = Graph::new();
        let bound = params.bind_constant(&mut g);
        let x = g.constant(image(2));
        let out = forward(&mut g, &spec, &bound, x, None).unwrap();
        (
            g.value(out.lengths).clone(),
            g.value(out.reconstruction.unwrap()).clone(),
        )
    };
    let (l1, r1) = run();
    let (l2, r2) = run();
    assert_eq!(l1, l2);
    assert_eq!(r1, r2);
    assert!(l1.data().iter().all(|&l| (0.0..1.0).contains(&l)));
    assert_eq!(r1.shape(), &[1, 784]);
    assert!(r1.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn baseline_forward_shapes() {
    let spec = NetworkSpec::baseline(RoutingMode::FanOut);
    let params = init_params(&spec);
    let mut g = Graph::new();
    let bound = params.bind_constant(&mut g);
    let x = g.constant(image(3));
    let out = forward(&mut g, &spec, &bound, x, None).unwrap();
    assert_eq!(g.shape(out.digit_caps.var), &[1, 10, 16]);
    assert_eq!(out.routing_state.couplings.shape(), &[1, 1152, 10]);
    assert!(out.reconstruction.is_none());
}

#[test]
fn drop_circuit_disabled_makes_train_equal_eval() {
    let spec = pcn(2, PathVariant::Table2Matched, false);
    let params = init_params(&spec);
    let labels = [3];
    let mut g = Graph::new();
    let bound = params.bind_constant(&mut g);
    let x = g.constant(image(4));
    let eval = forward(&mut g, &spec, &bound, x, None).unwrap();
    let train = TrainInputs {
        labels: &labels,
        masks: Masks::Minibatch(PathMask {
            keep: vec![true, false],
            attempts: 1,
        }),
    };
    let tr = forward(&mut g, &spec, &bound, x, Some(&train)).unwrap();
    assert_eq!(g.value(eval.lengths), g.value(tr.lengths));
}

#[test]
fn margin_loss_examples() {
    let mut g = Graph::new();
    let mut perfect = vec![0.05; 10];
    perfect[2] = 0.95;
    let l = g.constant(Tensor::new(&[1, 10], perfect).unwrap());
    let loss = margin_loss(&mut g, l, &[2]).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);

    let l = g.constant(Tensor::full(&[1, 10], 0.5));
    let loss = margin_loss(&mut g, l, &[7]).unwrap();
    assert!((g.value(loss).item().unwrap() - 0.88).abs() < 1e-12);

    let l = g.constant(Tensor::zeros(&[2, 10]));
    let loss = margin_loss(&mut g, l, &[0, 9]).unwrap();
    assert!((g.value(loss).item().unwrap() - 0.81).abs() < 1e-12);

    assert!(margin_loss(&mut g, l, &[0]).is_err());
    assert!(margin_loss(&mut g, l, &[0, 10]).is_err());
}

#[test]
fn reconstruction_loss_examples() {
    let mut g = Graph::new();
    let img = image(5);
    let x = g.constant(img.clone());
    let same = g.constant(img.clone().reshape(&[1, 784]).unwrap());
    let loss = reconstruction_loss(&mut g, same, x).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);

    let off = g.constant(img.map(|p| p + 0.1).reshape(&[1, 784]).unwrap());
    let loss = reconstruction_loss(&mut g, off, x).unwrap();
    assert!((g.value(loss).item().unwrap() - 0.00392).abs() < 1e-12);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for routing in [RoutingMode::FanIn, RoutingMode::FanOut] {
        let spec = NetworkSpec {
            routing,
            reconstruction: true,
            drop_circuit: DropCircuitConfig {
                enabled: true,
                ..Default::default()
            },
            ..NetworkSpec::path_caps(2, PathVariant::Table2Matched, routing)
        };
        let params = init_params(&spec);
        let mut rng = rng::stream(0, "coords", 0);
        let coords: Vec<(usize, usize)> = (0..params.len())
            .flat_map(|p| {
                let n = params.tensor(p).len();
                (0..2).map(|_| (p, rng.gen_range(0..n))).collect::<Vec<_>>()
            })
            .collect();
        let masks = Masks::Minibatch(PathMask {
            keep: vec![true, false],
            attempts: 1,
        });
        let checks =
            check_parameter_gradients(&spec, &params, &image(6), &[4], &masks, &coords, 1e-5).unwrap();
        let worst = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{routing}: {worst}");
        // The dropped path's parameters get exactly zero gradient.
        assert!(checks
            .iter()
            .filter(|c| c.param.starts_with("path1."))
            .all(|c| c.analytic == 0.0));
    }
}

#[test]
fn perturbation_grid() {
    let spec = pcn(1, PathVariant::Table1Literal, true);
    let params = init_params(&spec);
    let img = image(7);
    let grid = perturb_digitcaps(&spec, &params, &img, None, &[0, 1, 2], Sweep::default()).unwrap();
    assert_eq!(grid.rows.len(), 3);
    assert!(grid.rows.iter().all(|r| r.len() == 11));
    assert_eq!(grid.values.len(), 11);
    assert!((grid.values[10] - 0.25).abs() < 1e-12);

    let current = grid.capsule[4];
    let degenerate = Sweep {
        lo: current,
        hi: current,
        step: 0.05,
    };
    let g2 = perturb_digitcaps(&spec, &params, &img, Some(grid.digit), &[4], degenerate).unwrap();
    assert_eq!(g2.rows[0].len(), 1);
    assert_eq!(g2.rows[0][0], g2.reconstruction);

    let no_decoder = pcn(1, PathVariant::Table1Literal, false);
    let p = init_params(&no_decoder);
    assert!(matches!(
        perturb_digitcaps(&no_decoder, &p, &img, None, &[0], Sweep::default()),
        Err(Error::Contract(_))
    ));
    assert!(perturb_digitcaps(&spec, &params, &img, None, &[16], Sweep::default()).is_err());
}

#[test]
fn spec_text_round_trips() {
    let spec = NetworkSpec::baseline(RoutingMode::FanOut);
    let text = spec.canonical_text();
    assert_eq!(NetworkSpec::from_canonical_text(&text).unwrap(), spec);
    let spec = pcn(10, PathVariant::Table1Literal, true);
    assert_eq!(NetworkSpec::from_canonical_text(&spec.canonical_text()).unwrap(), spec);
    assert!(text.contains("\"kind\":\"capsnet\""));
}

#[test]
fn spec_validation() {
    let mut s = pcn(2, PathVariant::Table2Matched, false);
    s.validate().unwrap();
    s.iterations = 0;
    assert!(s.validate().is_err());
    let s = pcn(0, PathVariant::Table2Matched, false);
    assert!(s.validate().is_err());
    let mut s = NetworkSpec::baseline(RoutingMode::FanIn);
    s.drop_circuit.enabled = true;
    assert!(s.validate().is_err());
}

proptest! {
    #[test]
    fn margin_loss_nonnegative_and_zero_only_when_hinges_inactive(
        lengths in prop::collection::vec(0.0f64..1.0, 10),
        label in 0usize..10,
    ) {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[1, 10], lengths.clone()).unwrap());
        let loss = margin_loss(&mut g, l, &[label]).unwrap();
        let v = g.value(loss).item().unwrap();
        prop_assert!(v >= 0.0);
        let inactive = lengths.iter().enumerate().all(|(k, &x)| {
            if k == label { x >= MARGIN_POSITIVE } else { x <= MARGIN_NEGATIVE }
        });
        prop_assert_eq!(v == 0.0, inactive);
    }
}
