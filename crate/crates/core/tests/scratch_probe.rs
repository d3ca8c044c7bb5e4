//! Temporary probe. Deleted before delivery.
use alignlab_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
    Tensor::from_vec(&[size, size, 3], data)
}

#[test]
#[ignore]
fn probe_attack_dynamics() {
    let config = ModelConfig {
        image_size: 16, patch_size: 4, vision_dim: 32, text_dim: 32, embed_dim: 16,
        heads: 2, head_dim: 8, vision_blocks: 2, text_blocks: 1, ff_dim: 48, max_text_len: 6,
        ..ModelConfig::default()
    };
    let vocab = Vocabulary::build(["a red circle", "a blue square", "a green cross"]);
    let model = ModelParams::init(config, vocab.len(), 21).unwrap();
    let img = random_image(16, 5);
    for lr in [0.02f32, 0.05, 0.2, 0.5, 2.0] {
        let cfg = AttackConfig { learning_rate: lr, max_steps: 2000, tau: 0.995, ..AttackConfig::default() };
        let t0 = std::time::Instant::now();
        let result = run_alignment(&img, &[1, 4, 2], &model, &cfg).unwrap();
        println!("lr={lr}: steps={} converged={} final_cos={:.4} mean|dx|={:.4} elapsed={:?}",
            result.steps, result.converged, result.final_cosine,
            result.trace.last().unwrap().mean_abs_diff, t0.elapsed());
        let n = result.trace.len();
        for i in [0, n/8, n/4, n/2, 3*n/4, n-1] {
            let r = &result.trace[i];
            println!("   step {:5}  loss {:.5}  cos {:.5}  m|dx| {:.5}", r.step, r.loss, r.cosine, r.mean_abs_diff);
        }
    }
}

#[test]
#[ignore]
fn probe_training() {
    use alignlab_core::corpus::Vocabulary;
    use alignlab_core::train::{contrastive_train, evaluate_zero_shot, TrainConfig};

    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec).unwrap();
    let captions = spec.class_captions().unwrap();
    let vocab = Vocabulary::build(captions.iter().map(|s| s.as_str()));
    let held: Vec<CorpusItem> = corpus.iter().filter(|i| i.split == Split::HeldOut).cloned().collect();

    for lr in [0.3f32, 1.0, 3.0] {
        let mut model = ModelParams::init(ModelConfig::default(), vocab.len(), 7).unwrap();
        let t0 = std::time::Instant::now();
        let cfg = TrainConfig { epochs: 5, batch_size: 16, learning_rate: lr, ..TrainConfig::default() };
        let hist = contrastive_train(&mut model, &corpus, &vocab, &cfg).unwrap();
        let acc = evaluate_zero_shot(&model, &held, &captions, &vocab).unwrap();
        println!("lr={lr}: 5 epochs in {:?}, loss {:?} -> heldout acc {acc:.3}", t0.elapsed(), hist);
    }
}

#[test]
#[ignore]
fn probe_init_diversity() {
    use alignlab_core::corpus::Vocabulary;
    use alignlab_core::train::embed_captions;

    let spec = CorpusSpec { per_class: 3, holdout_per_class: 1, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let captions = spec.class_captions().unwrap();
    let vocab = Vocabulary::build(captions.iter().map(|s| s.as_str()));
    let model = ModelParams::init(ModelConfig::default(), vocab.len(), 7).unwrap();

    let img_embs: Vec<Embedding> = corpus.iter().take(24).map(|i| encode_image(&i.image, &model).unwrap()).collect();
    let txt_embs = embed_captions(&model, &captions, &vocab).unwrap();

    let mut ii = Vec::new();
    for i in 0..img_embs.len() { for j in 0..i { ii.push(img_embs[i].cosine(&img_embs[j])); } }
    let mut tt = Vec::new();
    for i in 0..txt_embs.len() { for j in 0..i { tt.push(txt_embs[i].cosine(&txt_embs[j])); } }
    let stats = |v: &[f32]| {
        let mean = v.iter().sum::<f32>() / v.len() as f32;
        let min = v.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        (min, mean, max)
    };
    println!("img-img cosines (min,mean,max): {:?}", stats(&ii));
    println!("txt-txt cosines (min,mean,max): {:?}", stats(&tt));
}

#[test]
#[ignore]
fn probe_lr_temp_sweep() {
    use alignlab_core::corpus::Vocabulary;
    use alignlab_core::train::{contrastive_train, evaluate_zero_shot, embed_captions, TrainConfig};

    let spec = CorpusSpec { per_class: 12, holdout_per_class: 4, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let captions = spec.class_captions().unwrap();
    let vocab = Vocabulary::build(captions.iter().map(|s| s.as_str()));
    let held: Vec<CorpusItem> = corpus.iter().filter(|i| i.split == Split::HeldOut).cloned().collect();

    for temp in [0.2f32, 0.5, 1.0] {
        for lr in [0.1f32, 0.3, 1.0] {
            let mut model = ModelParams::init(ModelConfig::default(), vocab.len(), 7).unwrap();
            let cfg = TrainConfig { epochs: 5, batch_size: 16, learning_rate: lr, temperature: temp, ..TrainConfig::default() };
            let hist = contrastive_train(&mut model, &corpus, &vocab, &cfg).unwrap();
            let acc = evaluate_zero_shot(&model, &held, &captions, &vocab).unwrap();
            let txt = embed_captions(&model, &captions, &vocab).unwrap();
            let mut tt = Vec::new();
            for i in 0..txt.len() { for j in 0..i { tt.push(txt[i].cosine(&txt[j])); } }
            let tmean = tt.iter().sum::<f32>() / tt.len() as f32;
            println!("temp={temp} lr={lr}: loss {:.3}->{:.3} acc={acc:.3} txt-mean-cos={tmean:.3}",
                     hist.first().unwrap(), hist.last().unwrap());
        }
    }
}
