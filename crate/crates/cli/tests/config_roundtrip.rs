use proptest::prelude::*;

use uno_cli::config::{resolve_text, RunConfig, Source};
use uno_core::packing::IntraRule;
use uno_core::trainer::Schedule;

fn arb_config() -> impl Strategy<Value = RunConfig> {
    let train = (1usize..5000, 1usize..64, 1e-6f64..1e-2, any::<bool>(), 0usize..50, 0.01f64..10.0, 0.5f64..0.99999, 0u64..=i64::MAX as u64);
    let uno = (0.0f64..2.0, 0.0f64..2.0, any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>());
    let rest = (1usize..=3, 0.0f64..1.0, 100usize..400, 1usize..64, prop::collection::vec(0u64..1000, 1..5), prop::option::of(0usize..=4), 0.01f64..0.99);
    (train, uno, rest).prop_map(|(t, u, r)| {
        let mut c = RunConfig::default();
        c.train.steps = t.0 + t.4;
        c.train.batch_size = t.1;
        c.train.peak_lr = t.2;
        c.train.schedule = if t.3 { Schedule::Cosine } else { Schedule::Constant };
        c.train.warmup_steps = t.4;
        c.train.timestep_shift = t.5;
        c.train.ema_ratio = t.6;
        c.train.seed = t.7;
        c.uno.lambda1 = u.0;
        c.uno.lambda2 = u.1;
        c.uno.augment = u.2;
        c.uno.mask_condition_prompt = u.3;
        c.uno.metaquery_order = if u.4 { IntraRule::Causal } else { IntraRule::Bidirectional };
        c.uno.sup_blocks_see_source = u.5;
        c.uno.enable_vision = u.6;
        c.data.max_objects = r.0;
        c.data.edit_fraction = r.1;
        c.eval.samples = r.2;
        c.eval.sampler_steps = r.3;
        c.eval.seeds = r.4;
        c.diagnose.pca_layer = r.5;
        c.diagnose.pca_t = r.6;
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialized_config_resolves_to_itself(c in arb_config()) {
        c.validate().unwrap();
        let text = c.to_toml();
        let r = resolve_text(Some((&text, "snapshot.toml")), &[]).unwrap();
        prop_assert_eq!(&r.config, &c);
        let again = resolve_text(Some((&r.config.to_toml(), "again.toml")), &[]).unwrap();
        prop_assert_eq!(again.config, c);
    }

    #[test]
    fn flags_always_win(steps in 200usize..1000, file_steps in 200usize..1000) {
        let text = format!("[train]\nsteps = {file_steps}\n");
        let r = resolve_text(Some((&text, "run.toml")), &[format!("train.steps={steps}")]).unwrap();
        prop_assert_eq!(r.config.train.steps, steps);
        prop_assert_eq!(r.provenance["train.steps"], Source::Flag);
    }
}

#[test]
fn oversized_seed_is_rejected() {
    let mut c = RunConfig::default();
    c.eval.seeds = vec![u64::MAX];
    assert!(c.validate().is_err());
}
