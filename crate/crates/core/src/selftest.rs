//! Fast oracle checks across every module, for release gating.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::color::{color_wheel, flow_to_color};
use crate::flo;
use crate::gradcheck;
use crate::matching::{build_cost_volume, cyclic_shift, global_match, orthonormal_codes, DEFAULT_CAPACITY};
use crate::metrics::{epe, f1_all, s40, OutlierRule};
use crate::nn::{Init, ParamStore};
use crate::pipeline::{self, FlowModel, ModelConfig, ModelError};
use crate::polymamba::PolyConfig;
use crate::pulse::{Aga, PulseConfig};
use crate::ssm::{self, StaticSsm, StepParams};
use crate::synth::{self, backward_warp, FlowSample, Motion, SynthConfig, Texture};
use crate::tensor::Tensor;

pub struct Outcome {
    pub name: &'static str,
    pub result: Result<(), String>,
}

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: got {a}, expected {b}"))
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn field(h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, 2], |i| {
        let (u, v) = f(i / 2 / w, (i / 2) % w);
        if i % 2 == 0 {
            u
        } else {
            v
        }
    })
    .expect("shape")
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        feat_dim: 8,
        backbone_width: 4,
        depth: 1,
        d_state: 2,
        d_hidden: 8,
        d_motion: 4,
        radius: 1,
        image_height: 16,
        image_width: 16,
        ..ModelConfig::default()
    }
}

const CHECKS: &[(&str, Check)] = &[
    ("zoh hand values", || {
        let d = ssm::discretize(&[-1.0f64], &[1.0], 2f64.ln()).map_err(s)?;
        close(d.a_bar[0], 0.5, 1e-15, "A_bar")?;
        close(d.b_bar[0], 0.5, 1e-15, "B_bar")
    }),
    ("recurrence and kernel hand values", || {
        let p = StepParams::new(3, 1, 1, vec![0.5; 3], vec![0.5; 3], vec![1.0; 3]).map_err(s)?;
        let x = Tensor::ones(&[3, 1]).map_err(s)?;
        let y = ssm::scan_sequential(&p, &x).map_err(s)?;
        ensure(y.data() == [0.5, 0.75, 0.875], || format!("recurrence {:?}", y.data()))?;
        let k = ssm::kernel_form(&p).map_err(s)?;
        ensure(k.taps == [0.5, 0.25, 0.125], || format!("kernel {:?}", k.taps))
    }),
    ("scan forms agree", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ssm = StaticSsm::new(vec![-0.5, -1.5, -3.0], vec![1.0, -0.5, 0.3], vec![0.2, 0.7, -1.0], 0.1).map_err(s)?;
        let p = ssm.steps(48, 4).map_err(s)?;
        let x = Tensor::<f64>::randn(&[48, 4], 1.0, &mut rng).map_err(s)?;
        let a = ssm::scan_sequential(&p, &x).map_err(s)?;
        let b = ssm::scan_parallel(&p, &x).map_err(s)?;
        let c = ssm::apply_kernel(&ssm::kernel_form(&p).map_err(s)?, &x).map_err(s)?;
        let e = a.max_abs_diff(&b).max(a.max_abs_diff(&c));
        ensure(e < 1e-10, || format!("max abs diff {e}"))
    }),
    ("gradients of primitives", || {
        for c in gradcheck::primitives(1).map_err(s)? {
            ensure(c.passed(), || c.to_string())?;
        }
        Ok(())
    }),
    ("orthonormal self-match is zero", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = orthonormal_codes::<f64, _>(4, 5, 50.0, &mut rng);
        let tape = Tape::new();
        let g = global_match(tape.constant(f.clone()), tape.constant(f), DEFAULT_CAPACITY).map_err(s)?;
        let m = g.flow.value().max_abs();
        ensure(m < 1e-3, || format!("max |V| {m}"))
    }),
    ("integer shift recovered", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fq = orthonormal_codes::<f64, _>(5, 6, 50.0, &mut rng);
        let fv = cyclic_shift(&fq, 1, 2);
        let tape = Tape::new();
        let v = global_match(tape.constant(fq), tape.constant(fv), DEFAULT_CAPACITY).map_err(s)?.flow.value();
        for i in 0..3 {
            for j in 0..5 {
                close(v.get(&[i, j, 0]), 1.0, 0.1, "u")?;
                close(v.get(&[i, j, 1]), 2.0, 0.1, "v")?;
            }
        }
        Ok(())
    }),
    ("matching capacity guard", || {
        let tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::zeros(&[8, 8, 1]).map_err(s)?);
        ensure(build_cost_volume(f, f, 63).is_err(), || "64 pixels accepted at capacity 63".into())
    }),
    ("matching rows and attention sum to one", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::randn(&[3, 4, 6], 2.0, &mut rng).map_err(s)?);
        let b = tape.constant(Tensor::<f64>::randn(&[3, 4, 6], 2.0, &mut rng).map_err(s)?);
        let m = global_match(a, b, DEFAULT_CAPACITY).map_err(s)?.distribution.value();
        for row in m.data().chunks(12) {
            close(row.iter().sum(), 1.0, 1e-6, "row sum")?;
        }
        let cfg = PulseConfig { d_hidden: 6, d_motion: 4, d_state: 2, radius: 1, ..PulseConfig::new(6) };
        let mut store = ParamStore::new();
        let aga = Aga::new(&mut Init { store: &mut store, rng: &mut rng }, "aga", &cfg);
        let p = store.bind_frozen(&tape);
        let mv = tape.constant(Tensor::randn(&[3, 4, 4], 1.0, &mut rng).map_err(s)?);
        let h = tape.constant(Tensor::randn(&[3, 4, 6], 1.0, &mut rng).map_err(s)?);
        let (_, att) = aga.forward(&p, mv, a, h).map_err(s)?;
        for px in att.value().data().chunks(3) {
            close(px.iter().sum(), 1.0, 1e-6, "attention sum")?;
        }
        Ok(())
    }),
    ("parameter-count ordering", || {
        let count = |c: ModelConfig| pipeline::count_parameters(&c).map_err(s);
        let full = count(tiny_model())?;
        let no_mlp = count(ModelConfig { use_mlp: false, ..tiny_model() })?;
        let no_cross = count(ModelConfig { use_cross: false, ..tiny_model() })?;
        ensure(full > no_mlp && no_mlp > no_cross, || format!("{full} / {no_mlp} / {no_cross}"))?;
        let poly = PolyConfig::new(8, (2, 2));
        ensure(poly.depth == 8, || "default depth".into())
    }),
    ("epe, f1-all and s40 hand values", || {
        let zero = field(2, 2, |_, _| (0.0, 0.0));
        close(epe(&field(2, 2, |_, _| (3.0, 4.0)), &zero, None).map_err(s)?, 5.0, 1e-12, "epe")?;
        let gt100 = field(2, 2, |_, _| (100.0, 0.0));
        let f = f1_all(&field(2, 2, |_, _| (104.0, 0.0)), &gt100, None, OutlierRule::And).map_err(s)?;
        close(f, 0.0, 0.0, "f1 at |gt| 100")?;
        let gt10 = field(2, 2, |_, _| (10.0, 0.0));
        let f = f1_all(&field(2, 2, |_, _| (14.0, 0.0)), &gt10, None, OutlierRule::And).map_err(s)?;
        close(f, 100.0, 0.0, "f1 at |gt| 10")?;
        let gt = field(1, 1, |_, _| (30.0, 40.0));
        close(s40(&field(1, 1, |_, _| (32.0, 40.0)), &gt).map_err(s)?.unwrap_or(f64::NAN), 2.0, 1e-12, "s40")?;
        ensure(s40(&zero, &zero).map_err(s)?.is_none(), || "s40 of small flows".into())
    }),
    (".flo byte oracle and roundtrip", || {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PIEH");
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        for v in [1f32, 2., 3., 4.] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let f = flo::decode(&bytes).map_err(s)?;
        ensure(f.shape() == [1, 2, 2] && f.data() == [1., 2., 3., 4.], || format!("{:?}", f.data()))?;
        ensure(flo::encode(&f).map_err(s)? == bytes, || "re-encoding differs".into())?;
        let mut bad = bytes.clone();
        bad[0] = 0;
        ensure(flo::decode(&bad).is_err() && flo::decode(&bytes[..20]).is_err(), || "corrupt file accepted".into())
    }),
    ("color wheel", || {
        let img = flow_to_color(&field(2, 2, |_, _| (0.0, 0.0)), Some(1.0));
        ensure(img.pixels.iter().all(|&v| v == 255), || "zero flow is not white".into())?;
        let img = flow_to_color(&field(2, 2, |_, _| (1.0, 0.0)), Some(1.0));
        let w0 = color_wheel()[0].map(|c| c.round() as u8);
        ensure(img.pixel(1, 1) == w0, || format!("+x gives {:?}, wheel[0] is {w0:?}", img.pixel(1, 1)))
    }),
    ("synthetic warp consistency", || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zero =
            FlowSample::render(Texture::random(16, 16, &mut rng), 16, 16, Motion::Translation { dx: 0.0, dy: 0.0 });
        ensure(zero.img1 == zero.img2 && zero.flow.data().iter().all(|&v| v == 0.0), || "zero motion".into())?;
        let shifted =
            FlowSample::render(Texture::random(16, 16, &mut rng), 16, 16, Motion::Translation { dx: -2.0, dy: 1.0 });
        let back = backward_warp(&shifted);
        for (k, occ) in shifted.occluded.iter().enumerate() {
            for c in 0..3 {
                let e = (back.data()[k * 3 + c] - shifted.img1.data()[k * 3 + c]).abs();
                ensure(*occ || e <= 1e-3, || format!("integer shift pixel {k}: {e}"))?;
            }
        }
        // fractional motion: frame 2 evaluated analytically at the gt target
        let cfg = SynthConfig { rotation_share: 0.5, ..SynthConfig::new(24, 24, 4.0) };
        for i in 0..4 {
            let smp = synth::sample(2, i, &cfg);
            let (h, w) = smp.size();
            for (k, uv) in smp.flow.data().chunks(2).enumerate() {
                let (tx, ty) = ((k % w) as f64 + uv[0] as f64, (k / w) as f64 + uv[1] as f64);
                let (sx, sy) = smp.motion.backward(h, w, tx, ty);
                let v = smp.texture.sample(sx, sy);
                for c in 0..3 {
                    let e = (v[c] - smp.img1.data()[k * 3 + c] as f64).abs();
                    ensure(e <= 1e-3, || format!("sample {i} pixel {k}: {e}"))?;
                }
            }
        }
        Ok(())
    }),
    ("weight file roundtrip and faults", || {
        let cfg = tiny_model();
        let (store, _) = FlowModel::new::<f32>(cfg, 1).map_err(s)?;
        let bytes = pipeline::weights::encode(&cfg, &store);
        let (c2, s2) = pipeline::weights::decode(&bytes).map_err(s)?;
        ensure(c2 == cfg && s2 == store, || "roundtrip differs".into())?;
        ensure(pipeline::weights::decode(&bytes[..bytes.len() - 3]).is_err(), || "truncation accepted".into())?;
        let mut bad = bytes;
        bad[1] = b'?';
        ensure(pipeline::weights::decode(&bad).is_err(), || "bad magic accepted".into())
    }),
    ("model contracts", || {
        let (store, m) = FlowModel::new::<f32>(tiny_model(), 2).map_err(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = Tensor::<f32>::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng).map_err(s)?;
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let (f1, f2) = m.extract_features(&p, tape.constant(img.clone()), tape.constant(img.clone())).map_err(s)?;
        ensure(*f1.value() == *f2.value(), || "shared weights differ".into())?;
        let out = m.forward(&p, tape.constant(img.clone()), tape.constant(img.clone()), Some(0)).map_err(s)?;
        let up = pipeline::upsample_flow(out.flows[0], 8).map_err(s)?;
        ensure(*out.flow.value() == *up.value(), || "zero iterations".into())?;
        let odd = tape.constant(Tensor::zeros(&[12, 16, 3]).map_err(s)?);
        ensure(matches!(m.forward(&p, odd, odd, None), Err(ModelError::Indivisible { .. })), || "12x16 accepted".into())
    }),
    ("sequence loss hand values", || {
        let tape = Tape::new();
        let gt = tape.constant(field(2, 2, |_, _| (0.0, 0.0)));
        let off = tape.constant(field(2, 2, |_, _| (1.0, 0.0)));
        let l = pipeline::sequence_loss(&[gt, off], gt, 0.8).map_err(s)?.value().item().map_err(s)?;
        close(l, 1.0, 1e-12, "loss")
    }),
];

pub fn run() -> Vec<Outcome> {
    CHECKS.iter().map(|&(name, f)| Outcome { name, result: f() }).collect()
}
