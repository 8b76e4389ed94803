//! Split, normalization, batching and checkpoint invariants on small corpora.

#[allow(dead_code)]
mod common;

use std::collections::BTreeSet;

use scanpath::corpus::{
    compute_norm_stats, generate_synthetic_corpus, make_splits, Corpus, SplitKind,
};
use scanpath::embed::build_vocab;
use scanpath::model::Model;
use scanpath::train::{load_checkpoint, train, AnyCheckpoint, Checkpoint, Precision};
use scanpath::Error;

fn synth(readers: usize, sentences: usize, seed: u64) -> Corpus {
    generate_synthetic_corpus(&common::planted_spec(), readers, sentences, seed)
        .unwrap()
        .corpus
}

fn ids(corpus: &Corpus, idx: &BTreeSet<usize>, reader: bool) -> BTreeSet<String> {
    idx.iter()
        .map(|&i| {
            let s = &corpus.scanpaths[i];
            if reader {
                s.reader_id.clone()
            } else {
                s.sentence_id.clone()
            }
        })
        .collect()
}

#[test]
fn splits_separate_the_held_out_ids() {
    let corpus = synth(7, 23, 3);
    let n = corpus.scanpaths.len();
    for kind in [
        SplitKind::NewSentence,
        SplitKind::NewReader,
        SplitKind::NewReaderNewSentence,
    ] {
        let plan = make_splits(&corpus, kind, 4, 17).unwrap();
        assert_eq!(
            plan,
            make_splits(&corpus, kind, 4, 17).unwrap(),
            "{kind:?} not deterministic"
        );
        assert_eq!(plan.folds.len(), 4);
        for fold in &plan.folds {
            assert!(fold.train.is_disjoint(&fold.test));
            assert!(!fold.test.is_empty() && !fold.train.is_empty());
            let by_sentence =
                ids(&corpus, &fold.train, false).is_disjoint(&ids(&corpus, &fold.test, false));
            let by_reader =
                ids(&corpus, &fold.train, true).is_disjoint(&ids(&corpus, &fold.test, true));
            match kind {
                SplitKind::NewSentence => {
                    assert!(by_sentence);
                    assert_eq!(fold.train.len() + fold.test.len(), n);
                }
                SplitKind::NewReader => {
                    assert!(by_reader);
                    assert_eq!(fold.train.len() + fold.test.len(), n);
                }
                SplitKind::NewReaderNewSentence => assert!(by_sentence && by_reader),
            }
        }
        if kind != SplitKind::NewReaderNewSentence {
            let mut all = BTreeSet::new();
            for fold in &plan.folds {
                assert!(all.is_disjoint(&fold.test), "{kind:?} test blocks overlap");
                all.extend(fold.test.iter().copied());
            }
            assert_eq!(all.len(), n, "{kind:?} test blocks do not cover the corpus");
        }
    }
}

#[test]
fn norm_stats_ignore_test_scanpaths() {
    let mut corpus = synth(4, 10, 5);
    let plan = make_splits(&corpus, SplitKind::NewSentence, 2, 1).unwrap();
    let fold = plan.fold(0).unwrap();
    let train_idx = fold.train_indices();
    let before = compute_norm_stats(&corpus, &train_idx).unwrap();
    for &i in &fold.test {
        for f in &mut corpus.scanpaths[i].fixations {
            f.duration *= 7.0;
            f.landing_pos = 0.99;
        }
    }
    assert_eq!(before, compute_norm_stats(&corpus, &train_idx).unwrap());
}

#[test]
fn batching_and_padding_do_not_change_predictions() {
    let corpus = synth(5, 12, 9);
    let all: Vec<usize> = (0..corpus.scanpaths.len()).collect();
    let norm = compute_norm_stats(&corpus, &all).unwrap();
    let readers: Vec<String> = corpus.reader_ids().into_iter().map(String::from).collect();
    let model = Model::<f64>::new(
        common::tiny_config(),
        corpus.max_sentence_len(&all),
        Some(build_vocab(&corpus)),
        &readers,
        4,
    )
    .unwrap();
    let single = model.predict(&corpus, &all, None, &norm, 1).unwrap();
    // Shuffled order mixes long and short paths inside each padded batch.
    let mut order = all.clone();
    order.reverse();
    order.rotate_left(7);
    let batched = model.predict(&corpus, &order, None, &norm, 16).unwrap();
    for (k, &i) in order.iter().enumerate() {
        let (a, b) = (&single[i], &batched[k]);
        assert_eq!(a.targets, b.targets);
        assert!(
            (a.nll - b.nll).abs() < 1e-12,
            "scanpath {i}: {} vs {}",
            a.nll,
            b.nll
        );
        for (p, q) in a.distributions.iter().zip(&b.distributions) {
            for (x, y) in p.iter().zip(q) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

fn small_checkpoint(corpus: &Corpus) -> Checkpoint<f64> {
    let mut tc = common::small_train(2);
    tc.max_epochs = 1;
    tc.precision = Precision::F64;
    let all: Vec<usize> = (0..corpus.scanpaths.len()).collect();
    train::<f64>(corpus, &all, None, &common::tiny_config(), &tc).unwrap()
}

#[test]
fn truncated_or_corrupted_checkpoints_are_rejected() {
    let corpus = synth(3, 6, 2);
    let ckpt = small_checkpoint(&corpus);
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(Checkpoint::<f64>::from_bytes(&bytes).unwrap(), ckpt);
    let step = (bytes.len() / 97).max(1);
    for cut in (0..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
        let r = Checkpoint::<f64>::from_bytes(&bytes[..cut]);
        assert!(
            matches!(r, Err(Error::Checkpoint(_))),
            "prefix of {cut} bytes accepted"
        );
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::<f64>::from_bytes(&trailing).is_err());
    assert!(
        Checkpoint::<f32>::from_bytes(&bytes).is_err(),
        "precision mismatch accepted"
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.eyckpt");
    ckpt.save(&path).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap(), AnyCheckpoint::F64(c) if c == ckpt));
}
