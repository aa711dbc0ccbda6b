use proptest::prelude::*;
use tove_core::numerics::{Graph, Optimizer, OptimizerKind, ParamStore, RandomSource, Tensor};
use tove_core::synth::grammar::MAX_CAPTION;
use tove_core::synth::render::BASE_CHANNELS;
use tove_core::synth::scene::{CANVAS, GRID_SLOTS, SLOT_PX};
use tove_core::synth::*;

#[test]
fn occupancy_is_uniform_within_three_sigma() {
    let mut rng = RandomSource::new(11);
    let n = 10_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[generate_scene(&mut rng).count()] += 1;
    }
    assert_eq!(counts[0], 0);
    let expect = n as f64 / 4.0;
    let sigma = (n as f64 * 0.25 * 0.75).sqrt();
    for (k, &c) in counts.iter().enumerate().skip(1) {
        assert!((c as f64 - expect).abs() < 3.0 * sigma, "count {k}: {c}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn caption_round_trips(seed in any::<u64>()) {
        let g = CaptionGrammar::default();
        let scene = generate_scene(&mut RandomSource::new(seed));
        prop_assert!(scene.is_valid());
        let sample = render(&scene, &g);
        prop_assert!(sample.caption.prompt.len() + sample.caption.target.len() <= MAX_CAPTION);
        let parsed = g.parse(&sample.caption.target).unwrap();
        let expected: Vec<CaptionEntry> = scene
            .objects()
            .map(|(slot, o)| {
                let family = Family::for_color(o.color);
                CaptionEntry { slot, color: o.color, family, value: o.attribute(family) }
            })
            .collect();
        prop_assert_eq!(parsed, expected);
    }

    #[test]
    fn base_canvas_ignores_hidden_attributes(seed in any::<u64>(), shape in 0usize..4, texture in 0usize..4) {
        let g = CaptionGrammar::default();
        let scene = generate_scene(&mut RandomSource::new(seed));
        let mut other = scene.clone();
        for o in other.slots.iter_mut().flatten() {
            o.shape = shape;
            o.texture = texture;
            o.boundary = !o.boundary;
        }
        let n = scene.count();
        let mut ranks: Vec<usize> = (0..n).collect();
        ranks.rotate_left(1);
        for (o, r) in other.slots.iter_mut().flatten().zip(ranks) {
            o.depth = r;
        }
        prop_assert!(render(&scene, &g).base.bit_eq(&render(&other, &g).base));
    }
}

#[test]
fn splits_have_requested_sizes_and_respect_holdout() {
    let rule = HoldoutRule::default_novel();
    let d = make_splits(&mut RandomSource::new(5), 300, 60, rule.clone()).unwrap();
    assert_eq!((d.train.len(), d.val.len()), (300, 60));
    for s in &d.train {
        assert!(!s.objects().any(|(_, o)| rule.is_held_out(o)));
    }
    for s in &d.val {
        assert!(s.objects().any(|(_, o)| rule.is_held_out(o)));
        assert!(!d.train.contains(s));
    }
    let again = make_splits(&mut RandomSource::new(5), 300, 60, rule).unwrap();
    assert_eq!(d, again);
}

#[test]
fn plain_split_is_disjoint() {
    let d = make_splits(&mut RandomSource::new(6), 400, 100, HoldoutRule::None).unwrap();
    assert_eq!((d.train.len(), d.val.len()), (400, 100));
    assert!(d.val.iter().all(|s| !d.train.contains(s)));
}

#[test]
fn dataset_file_round_trips_and_detects_corruption() {
    let g = CaptionGrammar::default();
    let d = make_splits(&mut RandomSource::new(8), 50, 10, HoldoutRule::default_novel()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    d.write(&path, &g).unwrap();
    assert_eq!(Dataset::read(&path, &g).unwrap(), d);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x7f;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Dataset::read(&path, &g), Err(tove_core::Error::CorruptDataset(_))));
}

/// Per-object features a linear probe can read from the base canvas: the
/// slot's pixels.
fn slot_features(sample: &RenderedSample, slot: usize) -> Vec<f64> {
    let (sy, sx) = (slot / GRID_SLOTS * SLOT_PX, slot % GRID_SLOTS * SLOT_PX);
    let mut f = Vec::with_capacity(SLOT_PX * SLOT_PX * BASE_CHANNELS + 1);
    for y in sy..sy + SLOT_PX {
        for x in sx..sx + SLOT_PX {
            let p = (y * CANVAS + x) * BASE_CHANNELS;
            f.extend_from_slice(&sample.base.data()[p..p + BASE_CHANNELS]);
        }
    }
    f.push(1.0);
    f
}

/// Multinomial logistic regression trained by full-batch AdamW; returns
/// test accuracy.
fn probe_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let d = train[0].0.len();
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[d, classes]), true);
    let x = Tensor::matrix(train.len(), d, train.iter().flat_map(|(f, _)| f.clone()).collect()).unwrap();
    let y: Vec<Option<usize>> = train.iter().map(|(_, c)| Some(*c)).collect();
    let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.05);
    for _ in 0..200 {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let logits = g.matmul(xv, p.var(w)).unwrap();
        let loss = g.cross_entropy(logits, &y).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate(&p, &grads);
        opt.step(&mut store);
    }
    let wt = store.get(w);
    let hits = test
        .iter()
        .filter(|(f, c)| {
            let scores: Vec<f64> = (0..classes)
                .map(|k| f.iter().enumerate().map(|(i, v)| v * wt.at(i, k)).sum())
                .collect();
            let best = (0..classes).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == *c
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn base_channels_carry_no_attribute_signal() {
    let g = CaptionGrammar::default();
    let mut rng = RandomSource::new(21);
    let mut rows: Vec<(Vec<f64>, Object)> = Vec::new();
    while rows.len() < 3000 {
        let scene = generate_scene(&mut rng);
        let sample = render(&scene, &g);
        for (slot, o) in scene.objects() {
            rows.push((slot_features(&sample, slot), *o));
        }
    }
    let (train, test) = rows.split_at(2000);
    let families: [(&str, usize, fn(&Object) -> usize); 4] = [
        ("shape", 4, |o| o.shape),
        ("texture", 4, |o| o.texture),
        ("depth", 4, |o| o.depth),
        ("edge", 2, |o| o.boundary as usize),
    ];
    for (name, classes, label) in families {
        let tr: Vec<_> = train.iter().map(|(f, o)| (f.clone(), label(o))).collect();
        let te: Vec<_> = test.iter().map(|(f, o)| (f.clone(), label(o))).collect();
        let mut freq = vec![0usize; classes];
        te.iter().for_each(|(_, c)| freq[*c] += 1);
        let chance = *freq.iter().max().unwrap() as f64 / te.len() as f64;
        let acc = probe_accuracy(&tr, &te, classes);
        assert!(acc <= chance + 0.05, "{name}: probe {acc:.3} vs chance {chance:.3}");
    }
}
