#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use featsr::codec::{Codec, CodecConfig};
use featsr::diffusion::{Conditioning, DiffusionModel, FmConfig, UNetConfig};
use featsr::features::{FeatureNet, FeatureNetConfig};
use featsr::sr::{SrConfig, SrGenerator};
use featsr::nn::ParamStore;
use featsr::ImageBuffer;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, dtype: DType, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn random_image(h: usize, w: usize, r: &mut ChaCha8Rng) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, |_, _, _| r.gen_range(0.05..0.95))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a.to_dtype(DType::F64).unwrap() - b.to_dtype(DType::F64).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn nudge(v: &Var, idx: usize, delta: f64) {
    let t = v.as_tensor();
    let mut data = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    data[idx] += delta;
    v.set(&Tensor::from_vec(data, t.shape(), t.device()).unwrap()).unwrap();
}

/// Relative error `‖g_ad − g_fd‖ / ‖g_fd‖` between autograd and central
/// differences, sampled at `per_var` random coordinates of every variable.
pub fn fd_rel_err<F>(vars: &[Var], per_var: usize, h: f64, seed: u64, loss: F) -> f64
where
    F: Fn() -> Tensor,
{
    let grads = loss().backward().unwrap();
    let mut r = rng(seed);
    let (mut num, mut den) = (0.0, 0.0);
    for v in vars {
        let g = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; v.elem_count()],
        };
        for _ in 0..per_var {
            let i = r.gen_range(0..v.elem_count());
            nudge(v, i, h);
            let lp = loss().to_scalar::<f64>().unwrap();
            nudge(v, i, -2.0 * h);
            let lm = loss().to_scalar::<f64>().unwrap();
            nudge(v, i, h);
            let fd = (lp - lm) / (2.0 * h);
            num += (g[i] - fd).powi(2);
            den += fd * fd;
        }
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

/// Overwrites every variable with uniform values in `[-scale, scale)`.
pub fn randomize(vars: &[Var], scale: f64, seed: u64) {
    let mut r = rng(seed);
    for v in vars {
        let t = uniform(v.dims(), -scale, scale, v.dtype(), &mut r);
        v.set(&t).unwrap();
    }
}

/// Micro FM whose zero-initialized output layer is replaced by random
/// weights, so adapters visibly change its predictions.
pub fn micro_fm(dtype: DType, token_dim: usize, seq_len: usize) -> DiffusionModel {
    let fm = DiffusionModel::init(FmConfig::new(UNetConfig::micro(token_dim), Conditioning::Feature, 0, seq_len), 21, dtype, false).unwrap();
    let mut t = fm.tensors();
    let w = &t["unet.conv_out.weight"];
    let fresh = uniform(w.dims(), -0.1, 0.1, dtype, &mut rng(22));
    t.insert("unet.conv_out.weight".into(), fresh);
    DiffusionModel::new(fm.config().clone(), ParamStore::from_tensors(t, dtype, false).unwrap(), None).unwrap()
}

/// SR generator over micro codec, U-Net and feature net in `dtype`.
pub fn micro_generator(dtype: DType, cfg: SrConfig) -> SrGenerator {
    let fcfg = FeatureNetConfig::micro();
    let features = FeatureNet::init(fcfg.clone(), 5, dtype).unwrap();
    let codec = Codec::init(CodecConfig::micro(), 6, dtype, false).unwrap();
    let fm = micro_fm(dtype, fcfg.dim, fcfg.seq_len());
    SrGenerator::new(cfg, codec, fm, Some(features)).unwrap()
}

pub fn micro_sr_config() -> SrConfig {
    SrConfig { lora_rank: 2, lora_alpha: 2.0, patch: 32, batch: 1, ..SrConfig::default() }
}
