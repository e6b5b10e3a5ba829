mod common;

use ckpt_core::metadata::Dtype;
use ckpt_core::{ModelSpec, ShardingSpec, TensorSpec};
use common::{random_model, random_spec, rng, round_trip};

fn spec(s: &str) -> ShardingSpec {
    s.parse().unwrap()
}

fn model_2d() -> ModelSpec {
    let t = |fqn: &str, shape: &[u64], axis: Option<usize>, stage: u32| TensorSpec {
        fqn: fqn.into(),
        global_shape: shape.to_vec(),
        dtype: Dtype::F32,
        tp_shard_axis: axis,
        pp_stage: stage,
    };
    ModelSpec {
        tensors: vec![
            t("embed", &[16, 8], Some(0), 0),
            t("attn.qkv", &[8, 12], Some(1), 0),
            t("mlp.up", &[8, 16], Some(1), 1),
            t("norm", &[8], None, 1),
        ],
        seed: 11,
    }
}

#[test]
fn tp_split_and_merge() {
    round_trip(&model_2d(), spec("tp=1,dp=2,pp=2"), spec("tp=4,dp=1,pp=2")).unwrap();
    round_trip(&model_2d(), spec("tp=4,dp=1,pp=2"), spec("tp=2,dp=2,pp=2")).unwrap();
}

#[test]
fn zero_to_plain_and_back() {
    round_trip(&model_2d(), spec("tp=2,dp=4,pp=2,zero"), spec("tp=1,dp=2,pp=2")).unwrap();
    round_trip(&model_2d(), spec("tp=1,dp=2,pp=2"), spec("tp=2,dp=4,pp=2,zero")).unwrap();
}

#[test]
fn pipeline_regrouping() {
    round_trip(&model_2d(), spec("tp=1,dp=1,pp=2"), spec("tp=1,dp=1,pp=4")).unwrap();
    let err = round_trip(&model_2d(), spec("tp=1,dp=1,pp=2"), spec("tp=1,dp=2,pp=1")).unwrap_err();
    assert!(err.contains("pipeline stage"), "{err}");
    let mut m = model_2d();
    m.tensors.iter_mut().for_each(|t| t.pp_stage = 0);
    round_trip(&m, spec("tp=2,dp=1,pp=4"), spec("tp=1,dp=4,pp=1")).unwrap();
}

#[test]
fn randomized_round_trips() {
    let mut r = rng(0x5eed);
    for case in 0..24 {
        let src = random_spec(&mut r, 16, true);
        let dst = random_spec(&mut r, 16, true);
        let model = random_model(&mut r, 6, 4096, src.pp.min(dst.pp));
        round_trip(&model, src, dst).unwrap_or_else(|e| panic!("case {case} {src} -> {dst}: {e}"));
    }
}
