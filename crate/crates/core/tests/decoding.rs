use ggp::autodiff::Tape;
use ggp::harness::evaluate;
use ggp::nn::{ModelConfig, MultiModalModel, Net};
use ggp::objectives::{finetune_loss, fuse_questions, VqaBatch};
use ggp::optim::{AdamW, AdamWConfig};
use ggp::perturb::{perturbed_training_step, PerturbationConfig, Phase};
use ggp::synthdata::{gen_vqa_set, VqaSample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn overfit_batch_decodes_its_answers() {
    let cfg = ModelConfig::default();
    let mut model = MultiModalModel::new(cfg.clone(), true, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let (train, _) = gen_vqa_set(22, 6, 1).unwrap();
    let refs: Vec<&VqaSample> = train.iter().collect();
    let batch = VqaBatch::from_samples(&refs);
    let mut opt = AdamW::new(AdamWConfig::default(), &model.params);
    let plain = PerturbationConfig::default();
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        let MultiModalModel { config, params } = &mut model;
        loss = perturbed_training_step(params, &mut opt, &plain, Phase::Finetune, 1e-3, |p| {
            let tape = Tape::new();
            let b = p.bind(&tape);
            let l = finetune_loss(&Net::new(&tape, &b, config), &batch)?;
            let v = tape.item(l);
            let mut g = tape.backward(l)?;
            Ok((v, p.collect_grads(&mut g, &b), ()))
        })
        .unwrap()
        .loss;
        if loss < 0.01 {
            break;
        }
    }
    assert!(loss < 0.01, "loss stuck at {loss}");

    let tape = Tape::new();
    let b = model.params.bind_constant(&tape);
    let net = Net::new(&tape, &b, &cfg);
    let (fused, valid) = fuse_questions(&net, &batch.image_refs(), &batch.questions).unwrap();
    assert_eq!(net.greedy_decode(fused, &valid).unwrap(), batch.answers);
    let acc = evaluate(&model, &train, 4).unwrap();
    assert_eq!(acc.overall(), 1.0);
}
