use cardioseg::config::RunConfig;
use cardioseg::mask::Mask;
use cardioseg::phantom::{self, Dataset, PhantomConfig};
use cardioseg::pso::{Dim, PsoConfig, SearchSpace, Swarm};
use cardioseg::{report, train};
use jsonschema::JSONSchema;
use proptest::prelude::*;

fn small_cohort(n: usize, seed: u64) -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::desk();
    cfg.phantom.slices = 2;
    let ds = Dataset::generate(n, seed, &cfg.phantom, 1).unwrap();
    (cfg, ds)
}

fn assert_valid(schema: &JSONSchema, v: &serde_json::Value) {
    if let Err(errs) = schema.validate(v) {
        let msgs: Vec<String> = errs.map(|e| format!("{} at {}", e, e.instance_path)).collect();
        panic!("report.json violates schema: {msgs:?}");
    }
}

#[test]
fn report_json_matches_schema() {
    let schema = JSONSchema::compile(&report::report_schema()).expect("schema compiles");
    let (cfg, ds) = small_cohort(3, 4);
    let samples: Vec<_> = ds.samples.iter().collect();

    let perfect: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    train::evaluate_masks(&cfg, &samples, &perfect).unwrap().write(dir.path()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_valid(&schema, &v);

    // empty predictions: diagonal HD95, empty ED cavity
    let empty: Vec<Mask> = samples.iter().map(|s| Mask::zeros(s.mask.h(), s.mask.w())).collect();
    let ev = train::evaluate_masks(&cfg, &samples, &empty).unwrap();
    assert_valid(&schema, &serde_json::to_value(&ev.report).unwrap());

    let mut broken = v.clone();
    broken.as_object_mut().unwrap().remove("per_class");
    assert!(!schema.is_valid(&broken));
}

fn space_strategy() -> impl Strategy<Value = SearchSpace> {
    prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0, any::<bool>()), 1..5).prop_map(|dims| {
        let dims = dims
            .into_iter()
            .enumerate()
            .map(|(i, (lo, span, log))| {
                let name = format!("d{i}");
                if log {
                    Dim::log(&name, lo.exp(), (lo + span).exp())
                } else {
                    Dim::linear(&name, lo, lo + span)
                }
            })
            .collect();
        SearchSpace::new(dims).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn swarm_bests_ordered_and_positions_boxed(space in space_strategy(), seed in any::<u64>(), particles in 2usize..8, iters in 0usize..6) {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (v - i as f64).powi(2)).sum::<f64>();
        let mut swarm = Swarm::new(&space, particles, seed, PsoConfig::default(), &[]).unwrap();
        let mut seen = vec![f64::INFINITY; particles];
        for it in 0..=iters {
            if it > 0 {
                swarm.advance(&space);
            }
            for x in &swarm.x {
                prop_assert!(space.contains(x));
            }
            for e in swarm.evaluate(&space, &f) {
                seen[e.particle] = seen[e.particle].min(e.objective);
            }
            for i in 0..particles {
                prop_assert!(swarm.fg <= swarm.fp[i]);
                prop_assert_eq!(swarm.fp[i], seen[i]);
            }
        }
    }

    #[test]
    fn phantom_nesting_and_normalisation(seed in any::<u64>()) {
        let cfg = PhantomConfig { slices: 2, ..PhantomConfig::default() };
        for s in phantom::generate_patient("p", seed, &cfg).unwrap() {
            prop_assert!(s.mask.lv_enclosed());
            prop_assert!(s.mask.count(1) > 0 && s.mask.count(2) > 0 && s.mask.count(3) > 0);
            let d = s.image.data();
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-6, "mean {}", mean);
            prop_assert!((sd - 1.0).abs() < 1e-6, "sd {}", sd);
        }
    }

    #[test]
    fn config_text_roundtrip(lr in 1e-5f64..1e-1, epochs in 1usize..100, seed in any::<u64>()) {
        let mut cfg = RunConfig::desk();
        cfg.set("lr_decoder", &lr.to_string()).unwrap();
        cfg.set("epochs", &epochs.to_string()).unwrap();
        cfg.set("seed", &seed.to_string()).unwrap();
        let back = RunConfig::from_text(&cfg.to_text(), &[]).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }
}
