mod common;

use std::collections::BTreeSet;

use common::{rand_tensor, rng};
use ghosthead::error::ParseErrorKind;
use ghosthead::model::{read_weights, Block, Layer, Model, ModelConfig, Network, Variant, YOLO11N_CONFIG};
use ghosthead::nn::{ConvBlock, GhostConv};
use ghosthead::{Dims, Error, Tensor};

fn net(v: Variant) -> Network {
    Network::build(&ModelConfig::yolo11n(), v).unwrap()
}

fn parse_err(text: &str) -> (ParseErrorKind, usize) {
    match ModelConfig::parse(text) {
        Err(Error::Parse { kind, line, .. }) => (kind, line),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn shipped_config_has_24_layers() {
    let cfg = ModelConfig::yolo11n();
    assert_eq!(cfg.layers.len(), 24);
    assert_eq!(cfg.backbone_len, 11);
    assert!(matches!(cfg.layers[10].block, Block::C2psa { .. }));
    assert!(matches!(cfg.layers[23].block, Block::Detect { nc: 10, reg_max: 16 }));
}

#[test]
fn parse_errors_are_distinct_and_located() {
    // layer 5 sits on line 9 of the shipped file
    let dangling = YOLO11N_CONFIG.replacen("[-1, 1, \"Conv\", 512, 3, 2],", "[7, 1, \"Conv\", 512, 3, 2],", 1);
    assert_eq!(parse_err(&dangling), (ParseErrorKind::DanglingReference, 9));

    let unknown = YOLO11N_CONFIG.replacen("\"SPPF\"", "\"SPPX\"", 1);
    assert_eq!(parse_err(&unknown).0, ParseErrorKind::UnknownBlock);

    let dup = YOLO11N_CONFIG.replacen(
        "[[16, 19, 22], 1, \"Detect\", 10, 16]",
        "[[16, 19, 22], 1, \"Detect\", 10, 16],\n    [[16, 19, 22], 1, \"Detect\", 10, 16]",
        1,
    );
    assert_eq!(parse_err(&dup), (ParseErrorKind::DuplicateDetect, 30));

    let missing = YOLO11N_CONFIG.replacen(",\n    [[16, 19, 22], 1, \"Detect\", 10, 16]", "", 1);
    assert_eq!(parse_err(&missing).0, ParseErrorKind::MissingDetect);

    assert_eq!(parse_err("{\"scale\": ").0, ParseErrorKind::Syntax);
}

#[test]
fn config_round_trip() {
    for v in Variant::ALL {
        let cfg = ModelConfig::yolo11n().with_variant(v);
        let again = ModelConfig::parse(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), cfg.to_json());
    }
}

#[test]
fn bad_variant_name() {
    assert!(matches!("bogus".parse::<Variant>(), Err(Error::Config(_))));
    assert_eq!("ghosthead".parse::<Variant>().unwrap(), Variant::Ghosthead);
}

fn count(n: &Network, f: impl Fn(&Layer, &Block) -> bool) -> usize {
    n.nodes.iter().filter(|x| f(&x.layer, &x.spec.block)).count()
}

#[test]
fn ghosthead_replaces_head_layers_only() {
    let base = net(Variant::Baseline);
    let ghost = net(Variant::Ghosthead);
    assert_eq!(count(&base, |l, _| matches!(l, Layer::Ghost(_))), 0);
    assert_eq!(count(&ghost, |l, _| matches!(l, Layer::Ghost(_))), 2);
    assert_eq!(count(&ghost, |_, b| matches!(b, Block::C2f { .. })), 4);
    assert_eq!(count(&ghost, |_, b| matches!(b, Block::C3k2 { .. })), 4);
    assert_eq!(count(&base, |_, b| matches!(b, Block::C3k2 { .. })), 8);
    for i in [17, 20] {
        assert!(matches!(ghost.nodes[i].spec.block, Block::GhostConv { k: 3, s: 2, .. }));
    }
    for (a, b) in base.nodes.iter().zip(&ghost.nodes).take(11) {
        assert_eq!(a, b);
    }

    // same seed: backbone parameters are drawn first and match bitwise
    let mb = Model::<f32>::init(base, 3).unwrap();
    let mg = Model::<f32>::init(ghost, 3).unwrap();
    let backbone = |m: &Model<f32>| -> Vec<(String, Vec<f32>)> {
        m.params
            .iter()
            .filter(|(k, _)| {
                let i: usize = k.split('.').nth(1).unwrap().parse().unwrap();
                i < 11
            })
            .map(|(k, p)| (k.clone(), p.value.data().to_vec()))
            .collect()
    };
    let (bb, bg) = (backbone(&mb), backbone(&mg));
    assert!(!bb.is_empty());
    assert_eq!(bb, bg);
}

#[test]
fn ledger_rows_and_totals() {
    let base = net(Variant::Baseline).ledger(640, 640).unwrap();
    let ghost = net(Variant::Ghosthead).ledger(640, 640).unwrap();
    assert_eq!(base.rows.len(), 24);
    assert_eq!(base.rows[..11], ghost.rows[..11]);
    for r in &ghost.rows {
        assert_eq!(r.replaced, [13, 16, 17, 19, 20, 22].contains(&r.index), "row {}", r.index);
    }
    assert!(base.rows.iter().all(|r| !r.replaced));

    // replaced downsampling convs are cheaper at both sites
    for i in [17, 20] {
        assert!(ghost.rows[i].macs < base.rows[i].macs);
        assert!(ghost.rows[i].params < base.rows[i].params);
    }

    for l in [&base, &ghost] {
        assert_eq!(l.total_macs(), l.rows.iter().map(|r| r.macs).sum::<u64>());
        assert!((l.gflops() - 2.0 * l.total_macs() as f64 / 1e9).abs() < 1e-12);
        let s = l.summary();
        assert_eq!(s.lines().filter(|x| x.trim_start().starts_with(char::is_numeric)).count(), 24);
        assert!(s.contains(&format!("{} params", l.total_params())));
        assert!(s.contains(&format!("{} MACs", l.total_macs())));
        assert_eq!(l.to_csv().lines().count(), 25);
    }
    assert!(ghost.summary().contains("GhostConv*"));
    assert!(!base.summary().contains('*'));
}

#[test]
fn mac_formula_examples() {
    assert_eq!(ConvBlock::new("a", 3, 16, 3, 2).macs(640, 640), 44_236_800);
    let g = GhostConv::new("g", 64, 64, 1, 1).unwrap();
    let dense = 32 * 64 * 40 * 40;
    let cheap = 32 * 25 * 40 * 40;
    assert_eq!(dense, 3_276_800);
    assert_eq!(cheap, 1_280_000);
    assert_eq!(g.macs(40, 40), 4_556_800);
    assert_eq!(ConvBlock::new("c", 64, 64, 1, 1).macs(40, 40), 6_553_600);
}

#[test]
fn gflops_near_reference_values() {
    let b = net(Variant::Baseline).ledger(640, 640).unwrap().gflops();
    let g = net(Variant::Ghosthead).ledger(640, 640).unwrap().gflops();
    assert!((b - 6.6).abs() <= 0.15 * 6.6, "baseline {b}");
    assert!((g - 6.7).abs() <= 0.15 * 6.7, "ghosthead {g}");
}

#[test]
fn count_params_matches_serialized_length() {
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let m = Model::<f32>::init(net(v), 1).unwrap();
        let path = dir.path().join(format!("{v}.ghwt"));
        m.save_weights(&path).unwrap();
        let entries = read_weights(std::fs::File::open(&path).unwrap()).unwrap();
        let n: usize = entries.iter().map(|e| e.values.len()).sum();
        assert_eq!(m.count_params(), n);
        assert_eq!(m.count_params(), net(v).ledger(640, 640).unwrap().total_params());
        assert!(m.count_trainable() < m.count_params());
    }
}

#[test]
fn forward_dims_at_640() {
    let m = Model::<f32>::init(net(Variant::Ghosthead), 0).unwrap();
    let x = Tensor::<f32>::full((1, 3, 640, 640), 0.5);
    let out = m.forward(&x).unwrap();
    let dims: Vec<Dims> = out.maps.iter().map(|t| t.dims()).collect();
    assert_eq!(dims, vec![Dims::new(1, 74, 80, 80), Dims::new(1, 74, 40, 40), Dims::new(1, 74, 20, 20)]);
    assert_eq!(out.strides, [8, 16, 32]);
    assert!(out.maps.iter().all(|t| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn forward_rejects_bad_input() {
    let m = Model::<f32>::init(net(Variant::Baseline), 0).unwrap();
    for d in [(1, 1, 64, 64), (1, 3, 64, 48), (1, 3, 70, 64)] {
        let x = Tensor::<f32>::zeros(d);
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))), "{d:?}");
    }
}

#[test]
fn initial_class_scores_near_prior() {
    let m = Model::<f32>::init(net(Variant::Ghosthead), 5).unwrap();
    let x = rand_tensor::<f32>((1, 3, 128, 128), 0.0, 1.0, &mut rng(2));
    let out = m.forward(&x).unwrap();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for t in &out.maps {
        let d = t.dims();
        for c in 64..74 {
            for i in 0..d.h {
                for j in 0..d.w {
                    sum += 1.0 / (1.0 + (-(t.at(0, c, i, j) as f64)).exp());
                    n += 1;
                }
            }
        }
    }
    let mean = sum / n as f64;
    assert!((0.005..=0.02).contains(&mean), "mean class score {mean}");
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f32>::init(net(Variant::Ghosthead), 9).unwrap();
    let x = rand_tensor::<f32>((1, 3, 64, 96), 0.0, 1.0, &mut rng(4));
    let y0 = m.forward(&x).unwrap();
    assert_eq!(m.forward(&x).unwrap(), y0);

    let p1 = dir.path().join("a.ghwt");
    let p2 = dir.path().join("b.ghwt");
    m.save_weights(&p1).unwrap();
    let loaded = Model::load_weights(net(Variant::Ghosthead), &p1).unwrap();
    assert_eq!(loaded.forward(&x).unwrap(), y0);
    loaded.save_weights(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let auto = Model::load_any_variant(&ModelConfig::yolo11n(), &p1).unwrap();
    assert_eq!(auto.net.variant, Variant::Ghosthead);
}

#[test]
fn weight_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let base = Model::<f32>::init(net(Variant::Baseline), 0).unwrap();
    let path = dir.path().join("w.ghwt");
    base.save_weights(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let load = |b: &[u8]| {
        let p = dir.path().join("x.ghwt");
        std::fs::write(&p, b).unwrap();
        Model::load_weights(net(Variant::Baseline), &p)
    };

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(load(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(load(&bad), Err(Error::Format(_))));
    assert!(matches!(load(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    assert!(matches!(load(&bytes[..2]), Err(Error::Truncated(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(load(&extra), Err(Error::Format(_))));
    assert!(load(&bytes).is_ok());

    // first path in file order that the ghosthead network does not know
    let ghost_paths: BTreeSet<String> = net(Variant::Ghosthead).param_specs().into_iter().map(|s| s.path).collect();
    let expected = base.params.paths().find(|p| !ghost_paths.contains(*p)).unwrap().clone();
    match Model::load_weights(net(Variant::Ghosthead), &path) {
        Err(Error::UnknownPath(p)) => assert_eq!(p, expected),
        other => panic!("expected unknown path, got {:?}", other.map(|_| ())),
    }
}
