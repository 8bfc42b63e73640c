mod common;

use common::{randomize_group, small_config};
use modtune_autodiff::Float;
use modtune_core::checkpoint::{load, read_meta, save};
use modtune_core::*;

fn round_trip<T: Float>() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let mut m = TransformerModel::<T>::new(ModelConfig { tie_embeddings: true, ..small_config(3) }).unwrap();
    lora::inject(&mut m, LoraConfig::new(4).excluding_top(2)).unwrap();
    let head = ModHead::attach(&mut m, ModConfig { k: 2, top_k: Some(1), ..Default::default() }).unwrap();
    randomize_group(&mut m, ParamGroup::Lora, 0.3, 1);
    randomize_group(&mut m, ParamGroup::ModNorms, 0.3, 2);
    save(&path, &m, Some(&head)).unwrap();
    let (back, back_head) = load::<T>(&path).unwrap();
    assert_eq!(back.params.len(), m.params.len());
    for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |p: &ParamStore<T>, name: &str| {
            p.get(name).unwrap().value.to_f64_vec().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&m.params, &a.name), bits(&back.params, &b.name));
    }
    assert_eq!(back_head.unwrap().config(), head.config());
    assert_eq!(read_meta(&path).unwrap().lora, m.lora_config().cloned());
}

#[test]
fn round_trip_is_bit_exact() {
    round_trip::<f32>();
    round_trip::<f64>();
}

#[test]
fn mismatched_structure_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let m = TransformerModel::<f32>::new(small_config(0)).unwrap();
    save(&path, &m, None).unwrap();
    let side = path.with_extension("json");
    let text = std::fs::read_to_string(&side).unwrap().replace("\"d_ff\": 32", "\"d_ff\": 64");
    std::fs::write(&side, text).unwrap();
    assert!(matches!(load::<f32>(&path), Err(CoreError::Format(_))));
}
