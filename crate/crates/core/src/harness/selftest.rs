//! Quick invariant checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_params, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, ModelConfig, MomentumCopies, MultiModalModel, Net};
use crate::objectives::{
    finetune_loss, pretrain_losses, ContrastiveContext, EmbeddingQueue, LossWeights, PretrainBatch, VqaBatch,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::perturb::{clip_and_apply, compute_perturbation, perturbed_training_step, PerturbationConfig, Phase};
use crate::synthdata::{gen_pretrain_set, gen_vqa_set, CaptionPair, VqaSample};
use crate::Tensor;

use super::ExperimentConfig;

pub struct SelfTestResult {
    pub name: &'static str,
    pub outcome: Result<String>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

fn perturbation_algebra() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_cos = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..64);
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
        let cfg = PerturbationConfig {
            delta: rng.gen_range(1e-3..0.5),
            epsilon: rng.gen_range(1e-4..1e-1),
            ..Default::default()
        };
        let r = compute_perturbation(&theta, &m, &cfg)?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = r.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>() / (norm(&r) * norm(&m));
        worst_cos = worst_cos.max((cos - 1.0).abs());
        let want = cfg.delta * norm(&theta);
        worst_norm = worst_norm.max((norm(&r) - want).abs() / want);
        let out = clip_and_apply(&theta, &r, cfg.epsilon)?;
        for (t, o) in theta.iter().zip(&out) {
            ensure((o - t).abs() <= cfg.epsilon * t.abs(), || {
                format!("clip bound violated at θ={t}")
            })?;
        }
        let zero = compute_perturbation(&theta, &vec![0.0; n], &cfg)?;
        ensure(zero.iter().all(|&x| x == 0.0), || {
            "zero moment gave a perturbation".into()
        })?;
    }
    ensure(worst_cos <= 1e-12 && worst_norm <= 1e-10, || {
        format!("cosine deviation {worst_cos:e}, norm deviation {worst_norm:e}")
    })?;
    Ok(format!(
        "1000 cases; max |cos−1| {worst_cos:.1e}, max norm rel. error {worst_norm:.1e}"
    ))
}

fn zero_delta_identity() -> Result<String> {
    let mut store = ParamStore::new();
    store.insert("visual.w", Tensor::vector(&[0.7, -1.3, 2.0]));
    store.insert("other", Tensor::vector(&[0.5]));
    let run = |delta: f64, enabled: bool| -> Result<ParamStore<f64>> {
        let mut p = store.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let cfg = PerturbationConfig {
            delta,
            enabled_pretrain: enabled,
            ..Default::default()
        };
        for _ in 0..10 {
            perturbed_training_step(&mut p, &mut opt, &cfg, Phase::Pretrain, 0.01, |p| {
                let tape = Tape::new();
                let b = p.bind(&tape);
                let w = b.get("visual.w")?;
                let o = b.get("other")?;
                let prod = tape.mul(w, w)?;
                let s = tape.sum(tape.mul(prod, w)?)?;
                let loss = tape.add(s, tape.mul(o, o)?)?;
                let value = tape.item(loss);
                let mut g = tape.backward(loss)?;
                Ok((value, p.collect_grads(&mut g, &b), ()))
            })?;
        }
        Ok(p)
    };
    let base = run(0.05, false)?;
    let zero = run(0.0, true)?;
    let on = run(0.05, true)?;
    ensure(base == zero, || "δ = 0 diverged from the unperturbed trajectory".into())?;
    ensure(base != on, || "δ > 0 had no effect".into())?;
    Ok("δ = 0 trajectory is bit-identical to the unperturbed one".into())
}

fn rigged_model(cfg: &ModelConfig) -> Result<MultiModalModel> {
    let mut m = MultiModalModel::new(cfg.clone(), true, &mut ChaCha8Rng::seed_from_u64(5))?;
    for head in ["img_proj", "txt_proj", "itm_head", "mlm_head", "decoder.head"] {
        m.params.get_mut(&format!("{head}.weight"))?.data_mut().fill(0.0);
        m.params.get_mut(&format!("{head}.bias"))?.data_mut().fill(0.0);
    }
    // identical unit features for every input make all contrastive logits equal
    m.params.get_mut("img_proj.bias")?.data_mut()[0] = 1.0;
    m.params.get_mut("txt_proj.bias")?.data_mut()[0] = 1.0;
    Ok(m)
}

fn uniform_logits() -> Result<String> {
    let cfg = ModelConfig::default();
    let m = rigged_model(&cfg)?;
    let pairs = gen_pretrain_set(3, 2);
    let refs: Vec<&CaptionPair> = pairs.iter().collect();
    let batch = PretrainBatch::prepare(&refs, 0.15, &mut ChaCha8Rng::seed_from_u64(4))?;
    let tape = Tape::new();
    let b = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &b, &cfg);
    let queue = EmbeddingQueue::new(0, cfg.contrastive_dim);
    let ctx = ContrastiveContext {
        momentum: None,
        queue: &queue,
        temperature: 0.07,
    };
    let l = pretrain_losses(&net, &batch, ctx, LossWeights::default())?.values(&tape);
    let (train, _) = gen_vqa_set(3, 4, 1)?;
    let refs: Vec<&VqaSample> = train.iter().collect();
    let lm = tape.item(finetune_loss(&net, &VqaBatch::from_samples(&refs))?);
    let ln2 = std::f64::consts::LN_2;
    let lnv = (cfg.vocab_size as f64).ln();
    let errs = [
        (l.itc - ln2).abs(),
        (l.itm - ln2).abs(),
        (l.mlm - lnv).abs(),
        (lm - lnv).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    ensure(worst <= 1e-9, || format!("uniform-logit deviations {errs:?}"))?;
    Ok(format!(
        "ITC/ITM = ln 2, MLM/LM = ln {}; max deviation {worst:.1e}",
        cfg.vocab_size
    ))
}

fn gradient_check() -> Result<String> {
    let cfg = ModelConfig::default();
    let m = MultiModalModel::new(cfg.clone(), true, &mut ChaCha8Rng::seed_from_u64(6))?;
    let pairs = gen_pretrain_set(6, 3);
    let refs: Vec<&CaptionPair> = pairs.iter().collect();
    let batch = PretrainBatch::prepare(&refs, 0.15, &mut ChaCha8Rng::seed_from_u64(7))?;
    let mom = MomentumCopies::from_live(&m.params, 0.995)?;
    let (mi, mt) = mom.features(&cfg, &batch.image_refs(), &batch.captions)?;
    let queue = EmbeddingQueue::new(8, cfg.contrastive_dim);
    let mut pre = m.params.clone();
    for name in m.names_with_prefix("decoder.").map(str::to_string).collect::<Vec<_>>() {
        pre.remove(&name);
    }
    let report = check_params(
        &pre,
        |tape, b| {
            let net = Net::new(tape, b, &cfg);
            let ctx = ContrastiveContext {
                momentum: Some((&mi, &mt)),
                queue: &queue,
                temperature: 0.07,
            };
            Ok(pretrain_losses(&net, &batch, ctx, LossWeights::default())?.total)
        },
        2e-4,
        1,
        &mut ChaCha8Rng::seed_from_u64(8),
    )?;
    ensure(report.max_relative_error < 1e-4, || {
        format!(
            "relative error {:e} at {}",
            report.max_relative_error, report.worst_parameter
        )
    })?;
    ensure(report.directional_error < 1e-4, || {
        format!("directional relative error {:e}", report.directional_error)
    })?;
    Ok(format!(
        "pre-training loss: {} coordinates, max relative error {:.1e} ({}); directional {:.1e}",
        report.coordinates_checked, report.max_relative_error, report.worst_parameter, report.directional_error
    ))
}

fn round_trips() -> Result<String> {
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain.lr = 1.0 / 3.0;
    ensure(ExperimentConfig::parse(&cfg.to_flat_string())? == cfg, || {
        "config round trip changed values".into()
    })?;
    let m = MultiModalModel::new(ModelConfig::default(), false, &mut ChaCha8Rng::seed_from_u64(9))?;
    let path = std::env::temp_dir().join(format!("ggp-selftest-{}.ckpt", std::process::id()));
    save_checkpoint(&path, &m.config, &m.params)?;
    let back = load_checkpoint(&path);
    let _ = std::fs::remove_file(&path);
    let back = back?;
    let same = m.params.iter().all(|(n, t)| {
        back.params.get(n).is_ok_and(|b| {
            b.shape() == t.shape() && b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    });
    ensure(same && back.params.len() == m.params.len(), || {
        "checkpoint round trip changed parameters".into()
    })?;
    Ok("config and checkpoint round trips are lossless".into())
}

pub fn run_selftest() -> Vec<SelfTestResult> {
    let checks: [(&'static str, fn() -> Result<String>); 5] = [
        ("perturbation algebra", perturbation_algebra),
        ("zero-δ identity", zero_delta_identity),
        ("uniform-logit losses", uniform_logits),
        ("gradient check", gradient_check),
        ("round trips", round_trips),
    ];
    checks
        .iter()
        .map(|&(name, f)| SelfTestResult { name, outcome: f() })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for r in super::run_selftest() {
            if let Err(e) = &r.outcome {
                panic!("{}: {e}", r.name);
            }
        }
    }
}
