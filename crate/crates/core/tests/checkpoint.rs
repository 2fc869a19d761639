use ctrlfuse_core::checkpoint::{Checkpoint, NamedTensor, RngState};
use ctrlfuse_core::model::{CtrlFuse, ModelConfig, PromptMask};
use ctrlfuse_core::synth::synth_generate;
use ctrlfuse_core::train::TrainConfig;
use ctrlfuse_core::Error;

const GOLDEN: &[u8] = include_bytes!("fixtures/golden_v1.cfck");

fn golden_tensors() -> Vec<NamedTensor> {
    vec![
        NamedTensor {
            name: "a".into(),
            dims: vec![2],
            data: vec![1.0, -2.5],
        },
        NamedTensor {
            name: "b.w".into(),
            dims: vec![1, 2, 1],
            data: vec![0.5, -0.125],
        },
    ]
}

#[test]
fn golden_fixture_layout() {
    // magic, version 1, two tensors
    assert_eq!(&GOLDEN[..12], b"CFCK\x01\x00\x00\x00\x02\x00\x00\x00");
    // name_len 1, "a", ndim 1, dim 2, then 1.0f32 and -2.5f32
    assert_eq!(&GOLDEN[12..20], &[1, 0, b'a', 1, 2, 0, 0, 0]);
    assert_eq!(&GOLDEN[20..28], &[0, 0, 0x80, 0x3f, 0, 0, 0x20, 0xc0]);
    assert_eq!(GOLDEN.len(), 12 + 16 + (2 + 3 + 1 + 12 + 8));
}

#[test]
fn golden_fixture_decodes_and_reencodes_identically() {
    let c = Checkpoint::decode(GOLDEN).unwrap();
    assert_eq!(c.tensors, golden_tensors());
    assert!(c.meta.is_none());
    assert_eq!(c.encode().unwrap(), GOLDEN);
}

#[test]
fn meta_trailer_is_length_prefixed_json() {
    let model = CtrlFuse::new(ModelConfig::desk(2)).unwrap();
    let rng = RngState {
        seed: 2,
        word_pos: "123".into(),
    };
    let c = Checkpoint::from_model(&model, Some(&TrainConfig::desk(2)), Some(rng.clone()));
    let bytes = c.encode().unwrap();
    let table = Checkpoint {
        tensors: c.tensors.clone(),
        meta: None,
    }
    .encode()
    .unwrap();
    assert_eq!(&bytes[..table.len()], table.as_slice());
    let len = u32::from_le_bytes(bytes[table.len()..table.len() + 4].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), table.len() + 4 + len);
    let json: serde_json::Value = serde_json::from_slice(&bytes[table.len() + 4..]).unwrap();
    assert_eq!(json["model"]["num_queries"], 40);
    assert_eq!(json["rng"]["word_pos"], "123");
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.meta.unwrap().rng, Some(rng));
}

#[test]
fn reload_reproduces_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cfck");
    let model = CtrlFuse::new(ModelConfig::desk(5)).unwrap();
    Checkpoint::from_model(&model, None, None).save(&path).unwrap();
    let reloaded = Checkpoint::load(&path).unwrap().to_model().unwrap();

    let scenes = synth_generate(3, 32, 8).unwrap();
    for s in &scenes {
        let mask = PromptMask::new(&s.class_mask(s.object_classes()[0])).unwrap();
        for alpha in [0.0, 1.0, 5.0] {
            let a = model.infer(&s.pair.ir, &s.pair.vis, Some(&mask), alpha).unwrap();
            let b = reloaded.infer(&s.pair.ir, &s.pair.vis, Some(&mask), alpha).unwrap();
            let d = a.fused.max_abs_diff(&b.fused);
            assert!(d <= 1e-6, "alpha {alpha}: {d}");
        }
    }
    // a second save of the reloaded model is byte-identical
    let again = dir.path().join("again.cfck");
    Checkpoint::from_model(&reloaded, None, None).save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn truncated_model_file_is_format_error() {
    let model = CtrlFuse::new(ModelConfig::desk(1)).unwrap();
    let bytes = Checkpoint::from_model(&model, None, None).encode().unwrap();
    for cut in [3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format(_))));
    }
}

#[test]
fn foreign_tensors_do_not_load_into_a_model() {
    let c = Checkpoint::decode(GOLDEN).unwrap();
    assert!(matches!(c.to_model(), Err(Error::Format(_))));

    let model = CtrlFuse::new(ModelConfig::desk(1)).unwrap();
    let mut c = Checkpoint::from_model(&model, None, None);
    c.tensors[0].name.push_str(".renamed");
    assert!(matches!(c.to_model(), Err(Error::Format(_))));
    let mut c = Checkpoint::from_model(&model, None, None);
    c.tensors[0].dims.push(1);
    assert!(matches!(c.to_model(), Err(Error::Format(_))));
}
