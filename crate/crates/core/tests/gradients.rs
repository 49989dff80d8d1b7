mod common;

use candle_core::{DType, Device, Var};

use common::*;
use featsr::codec::{codec_loss, Codec, CodecConfig};
use featsr::diffusion::randn;
use featsr::features::{FeatureNet, FeatureNetConfig};
use featsr::image::batch_to_tensor;
use featsr::sr::{bicubic_up, generator_loss, rec_loss, SrCond, SrConfig};

#[test]
fn rec_loss_gradient_on_4x4() {
    let mut r = rng(1);
    let sr = Var::from_tensor(&uniform(&[1, 3, 4, 4], 0.0, 1.0, DType::F64, &mut r)).unwrap();
    let hr = uniform(&[1, 3, 4, 4], 0.0, 1.0, DType::F64, &mut r);
    let net = FeatureNet::init(FeatureNetConfig { input_size: 4, ..FeatureNetConfig::micro() }, 2, DType::F64).unwrap();
    for (mse, percep) in [(1.0, 0.0), (1.0, 0.5), (0.0, 1.0)] {
        let err = fd_rel_err(std::slice::from_ref(&sr), 16, 1e-6, 3, || {
            rec_loss(sr.as_tensor(), &hr, Some(&net), mse, percep).unwrap().total
        });
        assert!(err <= 1e-3, "λ=({mse},{percep}) rel err {err}");
    }
}

#[test]
fn codec_loss_gradient_with_each_term() {
    let mut r = rng(4);
    let img = uniform(&[2, 3, 16, 16], 0.0, 1.0, DType::F64, &mut r);
    let noise = randn(&[2, 4, 2, 2], DType::F64, &mut r).unwrap();
    for (kl, perc) in [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5)] {
        let cfg = CodecConfig { kl_weight: kl, perceptual_weight: perc, ..CodecConfig::micro() };
        let codec = Codec::init(cfg.clone(), 5, DType::F64, true).unwrap();
        let err = fd_rel_err(&codec.store().vars(), 4, 1e-6, 6, || {
            let d = codec.encode_raw(&img).unwrap();
            let z = (&d.mean + ((&d.log_variance * 0.5).unwrap().exp().unwrap() * &noise).unwrap()).unwrap();
            codec_loss(&img, &codec.decode_raw(&z).unwrap(), &d, &cfg).unwrap().total
        });
        assert!(err <= 1e-3, "kl {kl} perc {perc}: rel err {err}");
    }
}

#[test]
fn generator_loss_gradient_without_vsd_and_percep() {
    let gen = micro_generator(DType::F64, SrConfig { lambda_percep: 0.0, ..micro_sr_config() });
    let vars = gen.trainable_vars();
    randomize(&vars, 0.05, 7);
    let mut r = rng(8);
    let lr = vec![random_image(8, 8, &mut r)];
    let up = batch_to_tensor(&[bicubic_up(&lr[0]).unwrap()], DType::F64, &Device::Cpu).unwrap();
    let hr = uniform(&[1, 3, 32, 32], 0.0, 1.0, DType::F64, &mut r);
    let ctx = gen.context(&lr, SrCond::Auto(None)).unwrap();
    let err = fd_rel_err(&vars, 2, 1e-6, 9, || {
        let (sr, z) = gen.forward(&up, &ctx).unwrap();
        generator_loss(&gen, &sr, &z, &hr, None).unwrap().0
    });
    assert!(err <= 1e-3, "rel err {err}");
}
