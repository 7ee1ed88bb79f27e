use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lmrcbt::data::{mmds, split_batches, Dataset, Label, Modality, MultimodalSample, Task};
use lmrcbt::kv::{self, KvMap};
use lmrcbt::model::{LmrCbt, ModelConfig};
use lmrcbt::nn::{Mode, Session};
use lmrcbt::tensor::gradcheck::random_tensor;
use lmrcbt::tensor::{Tape, Tensor};
use lmrcbt::train::{acc7_bin, weighted_f1};

fn sample(lens: [usize; 3], dims: [usize; 3], label: Label, seed: u64) -> MultimodalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = |i: usize| random_tensor(&[lens[i], dims[i]], -1.0, 1.0, &mut rng);
    let (l, v, a) = (seq(0), seq(1), seq(2));
    MultimodalSample::new(format!("s{seed}"), l, v, a, label).unwrap()
}

/// Features are stored in single precision, so exact round trips need
/// representable values.
fn single_precision(s: MultimodalSample) -> MultimodalSample {
    let round = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x as f32 as f64).collect()).unwrap();
    let [l, v, a] = Modality::ALL.map(|m| round(s.seq(m)));
    MultimodalSample::new(s.id.clone(), l, v, a, s.label.clone()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.leaf(random_tensor(&[rows, cols], -30.0, 30.0, &mut rng));
        let y = t.softmax(x, 1).unwrap();
        for r in t.data(y).chunks(cols) {
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn acc7_bins_partition(x in -10.0f64..10.0) {
        let b = acc7_bin(x);
        prop_assert!((-3..=3).contains(&b));
        let c = x.clamp(-3.0, 3.0);
        prop_assert!((c - b as f64).abs() <= 0.5);
    }

    #[test]
    fn weighted_f1_is_bounded_and_perfect_on_truth(truth in prop::collection::vec(any::<bool>(), 1..40), flips in any::<u64>()) {
        prop_assert_eq!(weighted_f1(&truth, &truth), 1.0);
        let pred: Vec<bool> = truth.iter().enumerate().map(|(i, &t)| t ^ (flips >> (i % 64) & 1 == 1)).collect();
        let f = weighted_f1(&pred, &truth);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn batches_partition_indices(n in 1usize..200, bs in 1usize..40, seed in any::<u64>()) {
        let batches = split_batches(n, bs, seed).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_batches(n, bs, seed).unwrap(), batches);
    }

    #[test]
    fn kv_text_roundtrips(entries in prop::collection::btree_map("[a-z]{1,6}\\.[a-z_]{1,8}", "[A-Za-z0-9.+-]{0,10}", 0..12)) {
        let m: KvMap = entries;
        prop_assert_eq!(kv::parse(&kv::to_text(&m)).unwrap(), m);
    }

    #[test]
    fn mmds_roundtrips(count in 0usize..6, seed in any::<u64>(), multilabel in any::<bool>()) {
        let dims = [3, 2, 4];
        let task = if multilabel { Task::Multilabel4 } else { Task::Sentiment };
        let samples: Vec<MultimodalSample> = (0..count)
            .map(|i| {
                let s = seed.wrapping_add(i as u64);
                let lens = [1 + (s % 5) as usize, 1 + (s % 3) as usize, 2 + (s % 4) as usize];
                let label = if multilabel {
                    Label::Multilabel([s % 2 == 0, s % 3 == 0, false, true])
                } else {
                    Label::Sentiment(((s % 49) as f64 - 24.0) / 8.0)
                };
                single_precision(sample(lens, dims, label, s))
            })
            .collect();
        let ds = Dataset::new(task, dims, samples).unwrap();
        let bytes = mmds::to_bytes(&ds);
        let back = mmds::read(bytes.as_slice(), Some((task, dims))).unwrap();
        prop_assert_eq!(back.content_hash(), ds.content_hash());
        prop_assert_eq!(mmds::to_bytes(&back), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fused_length_follows_target(tl in 1usize..30, tv in 1usize..30, ta in 1usize..30, target in 0usize..3, seed in any::<u64>()) {
        let cfg = ModelConfig {
            fusion_target: Modality::ALL[target],
            ..ModelConfig::tiny([3, 2, 3], Task::Sentiment)
        };
        let model = LmrCbt::new(&cfg).unwrap();
        let store = model.init_params(seed).unwrap();
        let lens = [tl, tv, ta];
        let s = sample(lens, cfg.dims(), Label::Sentiment(0.0), seed);
        let mut sess = Session::new(&store, Mode::Eval);
        let state = model.forward_state(&mut sess, &s).unwrap();
        let fused = state.fused.unwrap();
        prop_assert_eq!(sess.tape.shape(fused), &[lens[target], cfg.d_f][..]);
        prop_assert_eq!(sess.tape.shape(state.logits), &[1][..]);
        prop_assert!(sess.tape.data(state.logits)[0].is_finite());
    }

    #[test]
    fn eval_forward_ignores_batch_company(seed in any::<u64>(), n in 2usize..5) {
        let cfg = ModelConfig::tiny([3, 2, 3], Task::Multilabel4);
        let model = LmrCbt::new(&cfg).unwrap();
        let store = model.init_params(seed).unwrap();
        let samples: Vec<MultimodalSample> = (0..n)
            .map(|i| {
                let lens = [1 + i, 3, 2 + 2 * i];
                sample(lens, cfg.dims(), Label::Multilabel([true; 4]), seed ^ i as u64)
            })
            .collect();
        let refs: Vec<&MultimodalSample> = samples.iter().collect();
        let mut s = Session::new(&store, Mode::Eval);
        let batch = model.forward_batch(&mut s, &refs).unwrap();
        let batch: Vec<Tensor> = batch.iter().map(|&v| s.tape.value(v).clone()).collect();
        for (smp, b) in samples.iter().zip(&batch) {
            let mut one = Session::new(&store, Mode::Eval);
            let y = model.forward(&mut one, smp).unwrap();
            prop_assert_eq!(one.tape.value(y).data(), b.data());
        }
    }
}
