mod common;

use cdsr_core::corpus::{Domain, Split, SplitDataset};
use cdsr_core::evaluator::{evaluate, overlap_sweep, overlap_views, EvalConfig, EvalError};
use cdsr_core::model::Model;
use cdsr_core::profiler::{UserProfile, UserProfileStore};
use cdsr_core::semantic::SemanticStore;
use cdsr_core::trainer::{train, TrainConfig, TrainInputs, TrainOutcome, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Fixture {
    ds: SplitDataset,
    store: SemanticStore,
    profiles: UserProfileStore,
}

fn fixture(users: usize) -> Fixture {
    let (_, ds) = common::synthetic(users);
    let store = common::random_store(ds.id_map.clone(), 16, 8, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut profiles = UserProfileStore::in_memory();
    for u in &ds.users {
        let embedding = (0..16).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        profiles.insert(UserProfile { user_id: u.user_id.clone(), sub_summaries: vec![], overall_text: String::new(), embedding }).unwrap();
    }
    Fixture { ds, store, profiles }
}

fn small_config() -> TrainConfig {
    TrainConfig { d: 8, layers: 1, l_max: 20, batch_size: 64, dropout: 0.0, max_epochs: 10, patience: 100, k: 3, ..Default::default() }
}

fn run(f: &Fixture, cfg: &TrainConfig, variant: Variant) -> (TrainOutcome, Vec<serde_json::Value>) {
    let inputs = TrainInputs { dataset: &f.ds, semantic: &f.store, profiles: &f.profiles, single_cluster_profiles: None };
    let mut log = Vec::new();
    let out = train(&inputs, cfg, variant, Some(&mut log)).unwrap();
    let lines = String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    (out, lines)
}

fn step_lines(lines: &[serde_json::Value]) -> Vec<&serde_json::Value> {
    lines.iter().filter(|l| l.get("step").is_some()).collect()
}

#[test]
fn early_stopping_obeys_patience() {
    let f = fixture(200);
    let cfg = TrainConfig { max_epochs: 30, patience: 1, learning_rate: 0.02, ..small_config() };
    let (out, _) = run(&f, &cfg, Variant::Full);
    let r = &out.report;
    let crit: Vec<f64> = r.epochs.iter().map(|e| e.criterion).collect();
    let last = crit.len();
    assert_eq!(r.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), (1..=last).collect::<Vec<_>>());
    assert!(crit[..last - 1].windows(2).all(|w| w[1] > w[0]), "{crit:?}");
    if last < cfg.max_epochs {
        assert!(r.stopped_early);
        assert!(crit[last - 1] <= crit[last - 2]);
        assert_eq!(r.best_epoch, last - 1);
    } else {
        assert!(!r.stopped_early);
    }
    assert_eq!(r.best_criterion, crit[r.best_epoch - 1]);
}

#[test]
fn flat_validation_stops_after_patience_epochs() {
    let f = fixture(120);
    // a vanishing step leaves every ranking, and so the criterion, unchanged
    let cfg = TrainConfig { max_epochs: 20, patience: 2, learning_rate: 1e-14, ..small_config() };
    let (out, _) = run(&f, &cfg, Variant::Full);
    let r = &out.report;
    assert_eq!(r.epochs.len(), 3);
    assert_eq!(r.best_epoch, 1);
    assert!(r.stopped_early);
    assert!(r.epochs.iter().all(|e| e.criterion == r.best_criterion));
}

#[test]
fn next_item_loss_descends() {
    let f = fixture(200);
    let (out, _) = run(&f, &small_config(), Variant::Full);
    let srs = |i: usize| out.report.epochs[i].loss.srs_a + out.report.epochs[i].loss.srs_b;
    assert_eq!(out.report.epochs.len(), 10);
    assert!(srs(9) < srs(0), "{} -> {}", srs(0), srs(9));
}

#[test]
fn variants_switch_their_terms_off() {
    let f = fixture(120);
    let cfg = TrainConfig { max_epochs: 1, ..small_config() };
    let (_, full) = run(&f, &cfg, Variant::Full);
    let (_, wo_profile) = run(&f, &cfg, Variant::WoProfile);
    let (_, wo_reg) = run(&f, &cfg, Variant::WoReg);
    let (full, wo_profile, wo_reg) = (step_lines(&full), step_lines(&wo_profile), step_lines(&wo_reg));
    // before any update both variants see the same model, negatives and batch
    assert_eq!(full[0]["srs_a"], wo_profile[0]["srs_a"]);
    assert_eq!(full[0]["srs_b"], wo_profile[0]["srs_b"]);
    assert!(full[0]["profile"].as_f64().unwrap() > 0.0);
    assert!(wo_profile.iter().all(|l| l["beta"] == 0.0));
    assert!(wo_reg.iter().all(|l| l["alpha"] == 0.0));
    assert!(full.iter().all(|l| l["alpha"] == cfg.alpha && l["beta"] == cfg.beta));
    let total = |l: &serde_json::Value| {
        let g = |k: &str| l[k].as_f64().unwrap();
        (g("total") - (g("srs_a") + g("srs_b") + g("alpha") * g("reg") + g("beta") * g("profile"))).abs()
    };
    assert!(full.iter().chain(&wo_profile).chain(&wo_reg).all(|l| total(l) < 1e-9));
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let f = fixture(120);
    let cfg = TrainConfig { max_epochs: 3, ..small_config() };
    let (out, _) = run(&f, &cfg, Variant::Full);
    let (reloaded, meta) = Model::from_checkpoint(&out.checkpoint, &f.store).unwrap();
    assert_eq!(meta.epoch, out.report.best_epoch);
    let eval = EvalConfig::default();
    for split in [Split::Valid, Split::Test] {
        assert_eq!(evaluate(&out.model, &f.ds, split, &eval).unwrap(), evaluate(&reloaded, &f.ds, split, &eval).unwrap());
    }
    assert_eq!(reloaded.to_checkpoint(&meta), out.checkpoint);
}

#[test]
fn equal_scores_rank_by_item_index() {
    let f = fixture(150);
    let mut model = Model::new(small_config().model_config(Variant::Full), &f.store, 1).unwrap();
    for id in 0..model.params.len() {
        model.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
    let k_list = vec![1, 5, 10, 20];
    let report = evaluate(&model, &f.ds, Split::Test, &EvalConfig { k_list: k_list.clone(), mask_history: false }).unwrap();
    for dom in Domain::BOTH {
        let off = f.ds.id_map.offset(dom);
        let ranks: Vec<usize> = f.ds.users.iter().filter(|u| u.test.domain == dom).map(|u| u.test.item - off + 1).collect();
        for &k in &k_list {
            let rec = report.get(f.ds.id_map.labels.label(dom), k).unwrap();
            let hit = ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
            let ndcg = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / ranks.len() as f64;
            assert_eq!(rec.n_users, ranks.len());
            assert!((rec.hit - hit).abs() < 1e-12 && (rec.ndcg - ndcg).abs() < 1e-12, "{dom:?} k={k}");
        }
    }
}

#[test]
fn full_overlap_sweep_matches_plain_evaluation() {
    let f = fixture(150);
    let cfg = TrainConfig { max_epochs: 2, ..small_config() };
    let (out, _) = run(&f, &cfg, Variant::Full);
    let eval = EvalConfig::default();
    let (train_view, eval_view) = overlap_views(&f.ds, 1.0, 3, 5).unwrap();
    assert_eq!(train_view.users, f.ds.users);
    assert_eq!(eval_view.users, f.ds.users);
    let sweep = overlap_sweep(&f.ds, &[1.0], 3, 5, &eval, |_, _| Ok::<_, EvalError>(out.model.clone())).unwrap();
    let plain = evaluate(&out.model, &f.ds, Split::Test, &eval).unwrap();
    assert_eq!(sweep.len(), 1);
    assert_eq!(sweep[0].records.len(), plain.records.len());
    for (s, p) in sweep[0].records.iter().zip(&plain.records) {
        assert_eq!((&s.domain, s.k, s.hit, s.ndcg, s.n_users), (&p.domain, p.k, p.hit, p.ndcg, p.n_users));
        assert_eq!(s.overlap_ratio, 1.0);
    }
}
