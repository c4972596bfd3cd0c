use conrat_core::data::embeddings::random_embeddings;
use conrat_core::data::synthetic::{generate_synthetic, SyntheticConfig};
use conrat_core::data::vocab::Vocabulary;
use conrat_core::training::trainer::train;
use conrat_core::training::TrainConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let aspects: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let k: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(15);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let lo: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let n: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(300);
    let hidden: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(12);
    let chunk: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(4);
    let max_len: usize = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(40);
    let batch: usize = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(32);
    let teacher_epochs: usize = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(8);
    let ld: f64 = args.get(13).map(|s| s.parse().unwrap()).unwrap_or(lo);
    let tg: f64 = args.get(14).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let cfg_seed: u64 = args.get(15).map(|s| s.parse().unwrap()).unwrap_or(3);
    let dim: usize = args.get(16).map(|s| s.parse().unwrap()).unwrap_or(16);
    let use_cnn: bool = args.get(17).map(|s| s == "1").unwrap_or(false);
    let dropout: f64 = args.get(18).map(|s| s.parse().unwrap()).unwrap_or(0.0);

    let cfg = SyntheticConfig {
        num_docs: n,
        num_aspects: aspects,
        chunk_len: chunk,
        max_len,
        seed: 11,
        ..SyntheticConfig::default()
    };
    let docs = generate_synthetic(&cfg).unwrap();
    let vocab = Vocabulary::build(docs.iter().map(|d| d.tokens.as_slice()), dim);
    let data: Vec<(Vec<usize>, usize)> = docs
        .iter()
        .map(|d| (vocab.encode(&d.tokens), d.label as usize))
        .collect();
    let cut = n * 4 / 5;
    let (train_docs, dev_docs) = data.split_at(cut);

    let tc = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        hidden_size: hidden,
        embedding_dim: dim,
        lambda_overlap: lo,
        lambda_div: ld,
        lambda_distill: 0.0,
        dropout,
        weight_decay: 0.0,
        gumbel_temp_generator: tg,
        num_concepts: k,
        chunk_len: chunk,
        max_epochs: epochs,
        seed: cfg_seed,
        selector_cnn: use_cnn,
        ..TrainConfig::default()
    };
    let mut emb = random_embeddings(&vocab, 3);
    let lambda_t: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let warm_emb: bool = args.get(19).map(|s| s == "1").unwrap_or(false);
    let teacher = if lambda_t > 0.0 {
        let mut tcfg = tc.clone();
        tcfg.lambda_distill = 0.0;
        tcfg.max_epochs = teacher_epochs;
        let t = conrat_core::training::teacher::train_teacher(
            &tcfg, train_docs, dev_docs, emb.clone(), None,
        )
        .unwrap();
        eprintln!("teacher dev {:.3} (epoch {})", t.best_dev_accuracy, t.best_epoch);
        if warm_emb {
            emb = t.params.embedding.clone();
        }
        Some(t.params)
    } else {
        None
    };
    let mut tc = tc;
    tc.lambda_distill = lambda_t;
    let mut cb = |m: &conrat_core::training::trainer::EpochMetrics| {
        eprintln!(
            "epoch {:2}  loss {:.4}  pred {:.4}  ovl {:.3}  div {:.3}  dst {:.3}  dev {:.3}  ({:.2}s)",
            m.epoch, m.train_loss, m.pred, m.overlap, m.diversity, m.distill, m.dev_accuracy, m.seconds
        );
    };
    let out = train(&tc, train_docs, dev_docs, emb, teacher.as_ref(), Some(&mut cb)).unwrap();
    eprintln!("best epoch {} dev {:.3}", out.best_epoch, out.best_dev_accuracy);

    use conrat_core::model::forward::{forward, BatchInput, ForwardOptions};
    let batch = BatchInput::new(
        dev_docs.iter().map(|(d, _)| d.clone()).collect(),
        dev_docs.iter().map(|(_, l)| *l).collect(),
    )
    .unwrap();
    let r = forward(&out.params, &batch, &ForwardOptions::default()).unwrap();
    let b_n = dev_docs.len();
    for kk in 0..k {
        let s = r.graph.value(r.presence[kk]);
        let mean_s: f64 = s.iter().sum::<f64>() / b_n as f64;
        let p = r.graph.value(r.concept_logits[kk]);
        let mean_gap: f64 =
            (0..b_n).map(|b| (p[(b, 1)] - p[(b, 0)]).abs()).sum::<f64>() / b_n as f64;
        eprintln!("concept {kk}: eval presence mean {mean_s:.3}, |P1-P0| mean {mean_gap:.3}");
    }
    let lp = r.graph.value(r.log_probs);
    let pred_ones = (0..b_n).filter(|&b| lp[(b, 1)] > lp[(b, 0)]).count();
    eprintln!("eval predicts class 1 for {pred_ones}/{b_n}");
    eprintln!("alpha: {:?}", out.params.alpha);

    // Where do eval windows land vs gold chunks?
    let dev_raw = &docs[cut..];
    let mut hits = vec![0usize; k];
    let mut hits1 = vec![0usize; k];
    let mut aspect_of: Vec<Vec<usize>> = vec![vec![0; aspects]; k];
    let mut end_dist_sum = vec![0i64; k];
    for (b, d) in dev_raw.iter().enumerate() {
        let t_len = d.tokens.len();
        for kk in 0..k {
            let (ws, we) = r.masks[b].span(kk);
            end_dist_sum[kk] += (t_len - 1 - we) as i64;
            let mut best = 0i64;
            for (ai, (name, spans)) in d.annotations.iter().enumerate() {
                let _ = name;
                for &(gs, ge) in spans {
                    let inter = we.min(ge) as i64 - ws.max(gs) as i64 + 1;
                    best = best.max(inter);
                    if inter >= 3 {
                        hits[kk] += 1;
                        aspect_of[kk][ai] += 1;
                    }
                }
            }
            if best >= 1 {
                hits1[kk] += 1;
            }
        }
    }
    for kk in 0..k {
        eprintln!(
            "concept {kk}: gold-overlap(>=3tok) {}/{} (>=1tok {}), per-aspect {:?}, mean end-gap {:.1}",
            hits[kk], b_n, hits1[kk], aspect_of[kk],
            end_dist_sum[kk] as f64 / b_n as f64
        );
    }
    // Macro token F1 under the best concept-to-aspect assignment.
    let mut tp = vec![vec![0usize; aspects]; k];
    let mut pred_tok = vec![0usize; k];
    let mut gold_tok = vec![0usize; aspects];
    for (b, d) in dev_raw.iter().enumerate() {
        for kk in 0..k {
            let (ws, we) = r.masks[b].span(kk);
            pred_tok[kk] += we - ws + 1;
            for (ai, spans) in d.annotations.values().enumerate() {
                for &(gs, ge) in spans {
                    let inter = we.min(ge) as i64 - ws.max(gs) as i64 + 1;
                    if inter > 0 {
                        tp[kk][ai] += inter as usize;
                    }
                }
            }
        }
        for (ai, spans) in d.annotations.values().enumerate() {
            for &(gs, ge) in spans {
                gold_tok[ai] += ge - gs + 1;
            }
        }
    }
    let f1 = |kk: usize, ai: usize| -> f64 {
        let p = tp[kk][ai] as f64 / pred_tok[kk].max(1) as f64;
        let rcl = tp[kk][ai] as f64 / gold_tok[ai].max(1) as f64;
        if p + rcl == 0.0 { 0.0 } else { 2.0 * p * rcl / (p + rcl) }
    };
    let mut best_macro = 0.0f64;
    let perms: [[usize; 3]; 6] = [
        [0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
    ];
    if k == 3 && aspects == 3 {
        for perm in &perms {
            let m: f64 = (0..3).map(|kk| f1(kk, perm[kk])).sum::<f64>() / 3.0;
            best_macro = best_macro.max(m);
        }
        eprintln!("macro token F1 (best assignment): {best_macro:.3}");
    }
    // Per-class conditional mean of P1-P0 for each concept.
    for kk in 0..k {
        let p = r.graph.value(r.concept_logits[kk]);
        let (mut m1, mut n1, mut m0, mut n0) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (b, (_, l)) in dev_docs.iter().enumerate() {
            let gap = p[(b, 1)] - p[(b, 0)];
            if *l == 1 {
                m1 += gap;
                n1 += 1;
            } else {
                m0 += gap;
                n0 += 1;
            }
        }
        eprintln!(
            "concept {kk}: E[P1-P0|y=1] {:+.3}  E[P1-P0|y=0] {:+.3}",
            m1 / n1 as f64,
            m0 / n0 as f64
        );
    }
}
