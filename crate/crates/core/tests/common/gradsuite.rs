//! Finite-difference checks for every differentiable operation. Each entry
//! runs `INSTANCES` random cases and reports the worst relative error.

use msafeb_core::gradcheck::{grad_check, grad_check_many};
use msafeb_core::layers::conv::ConvSpec;
use msafeb_core::layers::{Ctx, Mode, ParamKind, ParamStore};
use msafeb_core::msafeb::{Msafeb, MsafebConfig};
use msafeb_core::Tensor;
use rand::Rng;

use super::{away_from_zero, project, rng};

pub const INSTANCES: u64 = 20;
pub const EPS: f32 = 1e-3;

pub type Check = fn(u64) -> f32;

pub fn suite() -> Vec<(&'static str, Check)> {
    vec![
        ("add", add),
        ("mul", mul),
        ("scale/add_scalar", affine),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("sum/select/reshape", reductions),
        ("concat/narrow", concat),
        ("dense", dense),
        ("conv2d k1/k3/k5 mixed", conv_mixed),
        ("conv2d dilation 4 groups 8", conv_paper_like),
        ("batch_norm train", batch_norm_train),
        ("batch_norm eval", batch_norm_eval),
        ("global_avg_pool", gap),
        ("dropout", dropout),
        ("channel gate", channel_gate),
        ("spatial gate", spatial_gate),
        ("softmax_cross_entropy", cross_entropy),
        ("msafeb forward", msafeb_forward),
    ]
}

/// Worst error of `check` over all instances.
pub fn run(check: Check) -> f32 {
    (0..INSTANCES).map(check).fold(0.0, f32::max)
}

fn small_dims(seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    vec![r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5)]
}

fn add(seed: u64) -> f32 {
    let d = small_dims(seed);
    let mut r = rng(seed);
    let xs = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&d, 1.0, &mut r)];
    grad_check_many(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

fn mul(seed: u64) -> f32 {
    let d = small_dims(seed);
    let mut r = rng(seed);
    let xs = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&d, 1.0, &mut r)];
    grad_check_many(
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

fn affine(seed: u64) -> f32 {
    let d = small_dims(seed);
    let x = Tensor::randn(&d, 1.0, &mut rng(seed));
    let s = rng(seed + 7).gen_range(-3.0f32..3.0);
    grad_check(
        |t, v| {
            let y = t.scale(v, s)?;
            let y = t.add_scalar(y, 0.5)?;
            project(t, y, seed)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn relu(seed: u64) -> f32 {
    let x = away_from_zero(&small_dims(seed), 0.05, seed);
    grad_check(
        |t, v| {
            let y = t.relu(v)?;
            project(t, y, seed)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn sigmoid(seed: u64) -> f32 {
    let x = Tensor::randn(&small_dims(seed), 2.0, &mut rng(seed));
    grad_check(
        |t, v| {
            let y = t.sigmoid(v)?;
            project(t, y, seed)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn reductions(seed: u64) -> f32 {
    let d = small_dims(seed);
    let x = Tensor::randn(&d, 1.0, &mut rng(seed));
    let n: usize = d.iter().product();
    let pick = rng(seed + 1).gen_range(0..n);
    grad_check(
        |t, v| {
            let flat = t.reshape(v, &[n])?;
            let sq = t.mul(flat, flat)?;
            let s = t.sum(sq)?;
            let e = t.select(flat, pick)?;
            let e3 = t.mul(e, e)?;
            let out = t.add(s, e3)?;
            t.scale(out, 0.5)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn concat(seed: u64) -> f32 {
    let mut r = rng(seed);
    let (n, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
    let cs = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
    let xs: Vec<Tensor> = cs.iter().map(|&c| Tensor::randn(&[n, c, h, w], 1.0, &mut r)).collect();
    let start = r.gen_range(0..cs[0]);
    grad_check_many(
        |t, v| {
            let y = t.concat_channels(v)?;
            let total = cs.iter().sum::<usize>();
            let band = t.narrow_channels(y, start, total - start)?;
            let s = t.sigmoid(band)?;
            project(t, s, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

fn dense(seed: u64) -> f32 {
    let mut r = rng(seed);
    let (n, fin, fout) = (r.gen_range(1..5), r.gen_range(1..7), r.gen_range(1..5));
    let xs = [
        Tensor::randn(&[n, fin], 1.0, &mut r),
        Tensor::randn(&[fin, fout], 1.0, &mut r),
        Tensor::randn(&[fout], 1.0, &mut r),
    ];
    grad_check_many(
        |t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

fn conv_case(spec: ConvSpec, h: usize, w: usize, seed: u64) -> f32 {
    let mut r = rng(seed);
    let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
    let mut xs = vec![
        Tensor::randn(&[2, spec.in_channels, h, w], 1.0, &mut r),
        Tensor::randn(&spec.weight_dims(), 1.0 / (fan_in as f32).sqrt(), &mut r),
    ];
    if spec.bias {
        xs.push(Tensor::randn(&[spec.out_channels], 0.5, &mut r));
    }
    grad_check_many(
        |t, v| {
            let y = t.conv2d(v[0], &spec, v[1], v.get(2).copied())?;
            project(t, y, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

fn conv_mixed(seed: u64) -> f32 {
    let mut r = rng(seed);
    let k = [1usize, 3, 5][seed as usize % 3];
    let d = [1usize, 2, 4][r.gen_range(0..3)];
    let g = [1usize, 2][r.gen_range(0..2)];
    let s = r.gen_range(1..3);
    let spec = ConvSpec::new(2 * g, 2 * g, k).dilation(d).groups(g).stride(s).bias(r.gen());
    conv_case(spec, r.gen_range(3..7), r.gen_range(3..7), seed)
}

fn conv_paper_like(seed: u64) -> f32 {
    let k = [1usize, 3, 5][seed as usize % 3];
    let spec = ConvSpec::new(8, 8, k).dilation(4).groups(8);
    conv_case(spec, 5, 5, seed)
}

fn batch_norm_train(seed: u64) -> f32 {
    let mut r = rng(seed);
    let (n, c, h, w) = (r.gen_range(2..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
    let xs = [
        Tensor::randn(&[n, c, h, w], 1.0, &mut r),
        Tensor::uniform(&[c], 0.5, 1.5, &mut r),
        Tensor::randn(&[c], 1.0, &mut r),
    ];
    grad_check_many(
        |t, v| {
            let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

fn batch_norm_eval(seed: u64) -> f32 {
    let mut r = rng(seed);
    let (n, c) = (r.gen_range(1..3), r.gen_range(1..4));
    let xs = [
        Tensor::randn(&[n, c, 3, 2], 1.0, &mut r),
        Tensor::uniform(&[c], 0.5, 1.5, &mut r),
        Tensor::randn(&[c], 1.0, &mut r),
    ];
    let mean = Tensor::randn(&[c], 1.0, &mut r).into_vec();
    let var = Tensor::uniform(&[c], 0.5, 2.0, &mut r).into_vec();
    grad_check_many(
        |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(t, y, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

fn gap(seed: u64) -> f32 {
    let x = Tensor::randn(&small_dims(seed), 1.0, &mut rng(seed));
    grad_check(
        |t, v| {
            let y = t.global_avg_pool(v)?;
            project(t, y, seed)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn dropout(seed: u64) -> f32 {
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng(seed));
    grad_check(
        |t, v| {
            // Same mask on every evaluation.
            let y = t.dropout(v, 0.5, Mode::Train, &mut rng(seed + 100))?;
            project(t, y, seed)
        },
        &x,
        EPS,
    )
    .unwrap()
}

fn channel_gate(seed: u64) -> f32 {
    let mut r = rng(seed);
    let (n, c, hid) = (r.gen_range(1..3), r.gen_range(2..5), r.gen_range(1..3));
    let xs = [
        Tensor::randn(&[n, c, 3, 3], 1.0, &mut r),
        Tensor::randn(&[c, hid], 1.0, &mut r),
        Tensor::randn(&[hid], 0.1, &mut r).map(|v| v + 0.5),
        Tensor::randn(&[hid, c], 1.0, &mut r),
    ];
    grad_check_many(
        |t, v| {
            let pooled = t.global_avg_pool(v[0])?;
            let h = t.dense(pooled, v[1], Some(v[2]))?;
            let h = t.sigmoid(h)?;
            let g = t.dense(h, v[3], None)?;
            let g = t.sigmoid(g)?;
            let y = t.mul_channel(v[0], g)?;
            project(t, y, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

/// Channel values at each position are well separated so that the
/// perturbation never switches which channel holds the maximum.
fn separated_channels(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut data = vec![0.0f32; n * c * h * w];
    for b in 0..n {
        for p in 0..h * w {
            let mut levels: Vec<f32> = (0..c).map(|i| i as f32 * 0.3 - 0.5).collect();
            rand::seq::SliceRandom::shuffle(levels.as_mut_slice(), &mut r);
            for (ch, lv) in levels.into_iter().enumerate() {
                data[(b * c + ch) * h * w + p] = lv + r.gen_range(-0.05..0.05);
            }
        }
    }
    Tensor::new(&[n, c, h, w], data).unwrap()
}

fn spatial_gate(seed: u64) -> f32 {
    let mut r = rng(seed);
    let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(2..5), r.gen_range(2..5), r.gen_range(2..5));
    let spec = ConvSpec::new(2, 1, 3);
    let xs = [
        separated_channels(n, c, h, w, seed),
        Tensor::randn(&spec.weight_dims(), 0.5, &mut r),
        Tensor::randn(&[1], 0.1, &mut r),
    ];
    grad_check_many(
        |t, v| {
            let mm = t.channel_mean_max(v[0])?;
            let s = t.conv2d(mm, &spec, v[1], Some(v[2]))?;
            let g = t.sigmoid(s)?;
            let y = t.mul_spatial(v[0], g)?;
            project(t, y, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}

fn cross_entropy(seed: u64) -> f32 {
    let mut r = rng(seed);
    let (n, k) = (r.gen_range(1..6), r.gen_range(2..6));
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    let x = Tensor::randn(&[n, k], 2.0, &mut r);
    grad_check(|t, v| t.softmax_cross_entropy(v, &labels), &x, EPS).unwrap()
}

/// Reduced block: K=8, 4 filters, 2 groups, 5×5 maps. Differentiates with
/// respect to the input and every learnable parameter at once.
pub fn reduced_config() -> MsafebConfig {
    MsafebConfig {
        input_channels: 8,
        branch_filters: 4,
        branch_groups: 2,
        branch_dilation: 1,
        aspp_branch_channels: 2,
        fusion_channels: 4,
        ..MsafebConfig::default()
    }
}

/// Pushes every ReLU pre-activation clear of zero so a finite-difference
/// step never straddles a kink. Branch and pyramid convs get small weights
/// and per-channel biases of ±1, so both mask states occur. The fusion conv
/// keeps its weights (BN downstream needs the spread) and is lifted by +3.
pub fn settle_units(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed ^ 0x5eed);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.entries()[id.index()].name.clone();
        let fusion = name.contains(".fusion.");
        let t = store.get_mut(id);
        if name.ends_with(".weight") && !fusion {
            t.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        } else if name.ends_with(".bias") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = if fusion { 3.0 } else if r.gen_bool(0.5) { 1.0 } else { -1.0 });
        }
    }
}

fn msafeb_forward(seed: u64) -> f32 {
    let cfg = reduced_config();
    let mut store = ParamStore::new();
    let block = Msafeb::new(&mut store, "m", cfg, &mut rng(seed)).unwrap();
    settle_units(&mut store, seed);
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.entries()[id.index()].kind == ParamKind::Learnable)
        .collect();
    let mut xs = vec![Tensor::randn(&[2, 8, 5, 5], 1.0, &mut rng(seed + 1))];
    xs.extend(ids.iter().map(|&id| store.get(id).clone()));
    grad_check_many(
        |t, v| {
            let mut local = store.clone();
            let mut ctx = Ctx::new(t, &mut local, Mode::Train);
            for (i, &id) in ids.iter().enumerate() {
                ctx.bind(id, v[i + 1]);
            }
            let out = block.forward(&mut ctx, v[0])?;
            project(ctx.tape, out.features, seed)
        },
        &xs,
        EPS,
    )
    .unwrap()
}
