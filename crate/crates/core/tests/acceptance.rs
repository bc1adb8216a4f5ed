//! One pass/fail line per acceptance criterion. Slow: trains several toy
//! models end to end.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::invariants::{permutation_gaps, stripped_inference_identical, superclass_exact, xmha_zero_identity};
use common::{ap_reference, atss_reference, exhaustive_min, random_cost, random_prediction_set};
use conceptdet::ablation::{run_ablation, Toggle};
use conceptdet::aux::{atss_assign, combine_aux, generate_anchors, AuxTerms, AUX_LOSS};
use conceptdet::checkpoint::tensor_hash;
use conceptdet::config::ModelConfig;
use conceptdet::decoder::{combine, StageTerms, DECODER_LOSS};
use conceptdet::eval::{evaluate, interactive_eval, subset_mean, PromptMode};
use conceptdet::gradcheck::{check_objective, Target, DEFAULT_STEP};
use conceptdet::matching::hungarian_match;
use conceptdet::model::Detector;
use conceptdet::pipeline::{distillation_stats, pretrain, train_visual_prompt, tune_prompts};
use conceptdet::tensor::suite::op_suite;
use conceptdet::tensor::{ParamSet, ParamStore, Session, Tensor};
use conceptdet::train::{Regime, TrainConfig};
use conceptdet::world::{coco_thresholds, evaluate_ap, generate_scene, training_categories, BenchmarkSplit, SceneSpec, HELD_OUT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

struct Harness {
    failed: usize,
}

impl Harness {
    fn run(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let dt = t0.elapsed();
        let (mut pass, mut detail) = out.unwrap_or_else(|e| (false, format!("error: {e}")));
        if let Some(b) = budget {
            if dt > b {
                pass = false;
                detail.push_str(&format!("; over the {}s budget", b.as_secs()));
            }
        }
        if !pass {
            self.failed += 1;
        }
        println!("[PRIMARY] {} {name}: {detail} ({:.1}s)", if pass { "PASS" } else { "FAIL" }, dt.as_secs_f64());
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_oracle() -> Outcome {
    let ops = op_suite(100, DEFAULT_STEP, None).map_err(err)?;
    let worst_op = ops.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).ok_or("empty op suite")?;
    let full = check_objective(Target::Pretrain, &ModelConfig::compact(), 0, DEFAULT_STEP).map_err(err)?;
    let pass = worst_op.max_rel_error <= 1e-5 && full.max_rel_error <= 1e-5;
    Ok((
        pass,
        format!(
            "{} ops worst {:.2e} ({}); pretrain objective {:.2e} over {} coordinates, {} skipped",
            ops.len(),
            worst_op.max_rel_error,
            worst_op.op,
            full.max_rel_error,
            full.coordinates,
            full.skipped
        ),
    ))
}

fn matching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for i in 0..1000 {
        let cost = random_cost(&mut rng, i);
        if hungarian_match(&cost).map_err(err)?.cost != exhaustive_min(&cost) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches}/1000 instances differ from the exhaustive minimum")))
}

fn assignment_oracle() -> Outcome {
    let anchors = generate_anchors(&[(8, 8), (4, 4), (2, 2), (1, 1)], 64);
    let spec = SceneSpec { min_objects: 0, ..SceneSpec::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mismatches, mut positives) = (0, 0);
    for i in 0..200u64 {
        let gts = if i % 2 == 0 {
            generate_scene(i, &spec).map_err(err)?.boxes
        } else {
            (0..rng.random_range(0..=5))
                .map(|_| {
                    let w = rng.random_range(4.0 / 64.0..0.9);
                    let h = rng.random_range(4.0 / 64.0..0.9);
                    conceptdet::boxes::BBox::new(rng.random_range(w / 2.0..=1.0 - w / 2.0), rng.random_range(h / 2.0..=1.0 - h / 2.0), w, h)
                })
                .collect()
        };
        let got = atss_assign(&anchors, &gts);
        positives += got.positives().len();
        if got.gt != atss_reference(64, &gts) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches}/200 scenes differ; {positives} positives total")))
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (preds, gts) = random_prediction_set(&mut rng);
        for thr in [coco_thresholds(), vec![0.5]] {
            worst = worst.max((evaluate_ap(&preds, &gts, &thr).mean - ap_reference(&preds, &gts, &thr).0).abs());
        }
    }
    Ok((worst <= 1e-9, format!("max |dAP| {worst:.1e} over 100 sets")))
}

fn loss_ledger() -> Outcome {
    let store = ParamStore::<f64>::new();
    let none = ParamSet::none(&store);
    let mut s = Session::new(&store, &none);
    let one = s.constant(Tensor::scalar(1.0));
    let dec = combine(&mut s, &StageTerms { class: one, l1: one, giou: one }, DECODER_LOSS).map_err(err)?;
    let aux = combine_aux(&mut s, &AuxTerms { class: one, centerness: one, giou: one }, AUX_LOSS).map_err(err)?;
    let (d, a) = (s.value(dec).item(), s.value(aux).item());
    let pass = d == 8.0 && a == 24.0 && (DECODER_LOSS.class, DECODER_LOSS.l1, DECODER_LOSS.giou) == (1.0, 5.0, 2.0) && (AUX_LOSS.class, AUX_LOSS.centerness, AUX_LOSS.giou) == (6.0, 6.0, 12.0);
    Ok((pass, format!("decoder {d} ({}/{}/{}), aux {a} ({}/{}/{})", DECODER_LOSS.class, DECODER_LOSS.l1, DECODER_LOSS.giou, AUX_LOSS.class, AUX_LOSS.centerness, AUX_LOSS.giou)))
}

fn overfit(split: &BenchmarkSplit, slot: &mut Option<Detector>) -> Outcome {
    let cfg = TrainConfig::default();
    let (det, run) = pretrain(&cfg, split, |_, _| {}).map_err(err)?;
    let ap = evaluate(&det, split, PromptMode::Text, 0).map_err(err)?.coco.mean;
    *slot = Some(det);
    Ok((ap >= 0.90 && run.steps <= 2000, format!("AP@[.5:.95] {ap:.3} after {} steps on {} scenes", run.steps, split.scenes.len())))
}

fn compositional_probe() -> Outcome {
    let train = BenchmarkSplit::overfit(256, 20000).map_err(err)?;
    let (det, _) = pretrain(&TrainConfig::default(), &train, |_, _| {}).map_err(err)?;
    let probe = BenchmarkSplit::held_out_probe(60, 5000).map_err(err)?;
    let text = subset_mean(&evaluate(&det, &probe, PromptMode::Text, 0).map_err(err)?.ap50, &HELD_OUT);
    let control = subset_mean(&evaluate(&det, &probe, PromptMode::Shuffled, 0).map_err(err)?.ap50, &HELD_OUT);
    Ok((text > control, format!("held-out AP50 {text:.3} vs shuffled-prompt control {control:.3}")))
}

fn distillation(base: Option<&Detector>, split: &BenchmarkSplit) -> Outcome {
    let base = base.ok_or("no pre-trained model")?.clone();
    let text_ap = evaluate(&base, split, PromptMode::Text, 0).map_err(err)?.coco.mean;
    let cfg = TrainConfig { steps: 800, ..TrainConfig::for_regime(Regime::VisualPrompt) };
    let (det, run) = train_visual_prompt(base, &cfg, split, |_, _| {}).map_err(err)?;
    let stats = distillation_stats(&det, split, &training_categories(), 0).map_err(err)?;
    let inter = interactive_eval(&det, split, 7).map_err(err)?.coco.mean;
    let pass = stats.cosine >= 0.8 && stats.mse < 0.05 && inter >= text_ap && run.frozen_unchanged();
    Ok((pass, format!("cosine {:.3}, MSE {:.4} over {} pairs; interactive AP {inter:.3} vs text {text_ap:.3}; frozen unchanged {}", stats.cosine, stats.mse, stats.pairs, run.frozen_unchanged())))
}

fn transfer(base: Option<&Detector>, split: &BenchmarkSplit) -> Outcome {
    let base = base.ok_or("no pre-trained model")?;
    let shifted = split.label_shifted();
    let keep = |n: &str| !n.starts_with("optimized.");
    let before = tensor_hash(&base.store, keep);
    let mut ap = [0.0; 2];
    let mut zero_shot = 0.0;
    let mut frozen = true;
    for (i, m) in [1, 10].into_iter().enumerate() {
        let cfg = TrainConfig { super_class: m, ..TrainConfig::for_regime(Regime::TunePrompt) };
        let (det, r) = tune_prompts(base, &cfg, &shifted, |_, _| {}).map_err(err)?;
        frozen &= r.run.frozen_unchanged() && tensor_hash(&det.store, keep) == before;
        ap[i] = r.tuned_ap;
        zero_shot = r.zero_shot_ap;
    }
    let pass = ap[0] >= zero_shot + 0.1 && ap[1] >= ap[0] - 0.02 && frozen;
    Ok((pass, format!("zero-shot {zero_shot:.3}, tuned M=1 {:.3}, M=10 {:.3}; frozen byte-identical {frozen}", ap[0], ap[1])))
}

fn invariance() -> Outcome {
    let gaps: Vec<(f64, f64)> = (0..3).map(permutation_gaps).collect();
    let worst = gaps.iter().map(|g| g.0.max(g.1)).fold(0.0, f64::max);
    let zero = xmha_zero_identity(0);
    let stripped = stripped_inference_identical(1);
    let superclass = superclass_exact(2, 500);
    let pass = worst <= 1e-6 && zero && stripped && superclass;
    Ok((pass, format!("permutation gap {worst:.1e}; zeroed X-MHA identity {zero}; inference without training heads identical {stripped}; super-class monotone and idempotent {superclass}")))
}

fn ablation(split: &BenchmarkSplit) -> Outcome {
    let base = TrainConfig { steps: 300, ..TrainConfig::default() };
    let tune = TrainConfig { steps: 100, ..TrainConfig::for_regime(Regime::TunePrompt) };
    let report = run_ablation(&Toggle::ALL, &base, &tune, split, &split.label_shifted()).map_err(err)?;
    print!("{report}");
    let complete = report.rows.len() == 1 + 4 + 2;
    Ok((complete && report.all_checks_pass(), format!("{} variants, all structural checks pass {}", report.rows.len(), report.all_checks_pass())))
}

fn main() {
    let mut h = Harness { failed: 0 };
    let split = BenchmarkSplit::overfit(32, 1000).expect("overfit split");
    let mut base = None;
    h.run("gradient oracle", Some(Duration::from_secs(300)), gradient_oracle);
    h.run("matching oracle", Some(Duration::from_secs(30)), matching_oracle);
    h.run("assignment oracle", None, assignment_oracle);
    h.run("AP oracle", None, ap_oracle);
    h.run("loss-weight ledger", None, loss_ledger);
    h.run("overfit run", Some(Duration::from_secs(900)), || overfit(&split, &mut base));
    h.run("compositional probe", None, compositional_probe);
    h.run("visual-prompt distillation", None, || distillation(base.as_ref(), &split));
    h.run("optimized-prompt transfer", None, || transfer(base.as_ref(), &split));
    h.run("invariance suite", None, invariance);
    h.run("ablation harness", None, || ablation(&split));
    println!("{} of 11 criteria failed", h.failed);
    if h.failed > 0 {
        std::process::exit(1);
    }
}
