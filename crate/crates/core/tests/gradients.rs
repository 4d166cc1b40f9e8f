//! Backprop against central differences in double precision, h = 1e-5.
//! Parameters are redrawn at a larger scale than the training init so that
//! every nonlinearity is exercised away from its linear regime. Entries whose
//! stencil straddles a ReLU or max-pool kink are screened out, and may make
//! up at most 5% of those sampled.

use fundus::attention::CbamSpec;
use fundus::networks::{discriminator_forward, generator_forward, DiscriminatorSpec, GeneratorSpec};
use fundus::params::NetParams;
use fundus::probe::{self, finite_difference_check, GradCheck};
use fundus::segnet::UNetSpec;
use fundus::tape::Tape;
use fundus::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn redraw(params: &mut NetParams, std: f64, rng: &mut impl Rng) {
    let n = Normal::new(0.0, std).unwrap();
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = n.sample(rng));
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

const MAX_KINK_FRACTION: f64 = 0.05;

fn assert_close(what: &str, r: &GradCheck) {
    println!(
        "{what}: {} entries ({} at kinks), max rel error {:.3e} at {}",
        r.checked, r.kinks, r.max_rel_error, r.worst
    );
    assert!(r.max_rel_error < TOL, "{what}: {r:?}");
    assert!(
        (r.kinks as f64) <= MAX_KINK_FRACTION * r.checked as f64,
        "{what}: {r:?}"
    );
}

#[test]
fn cbam_gradients() {
    let mut g = rng(1);
    let spec = CbamSpec {
        reduction_ratio: 2,
        spatial_kernel: 3,
    };
    let mut p = NetParams::init(&spec.layout("", 4), &mut g).unwrap();
    redraw(&mut p, 0.5, &mut g);
    let x = uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut g);
    let w = uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut g);
    let grads = probe::cbam(&x, &spec, &p, &w).unwrap();
    let r = finite_difference_check(&x, &p, &grads, 64, H, FLOOR, |x, p| {
        Ok(weighted(&probe::cbam_forward_raw(x, &spec, p)?, &w))
    })
    .unwrap();
    assert_close("cbam", &r);
}

#[test]
fn generator_gradients() {
    let mut g = rng(2);
    let spec = GeneratorSpec::scaled(
        [4, 8, 8],
        2,
        CbamSpec {
            reduction_ratio: 4,
            spatial_kernel: 3,
        },
    );
    let mut p = spec.init(&mut g).unwrap();
    redraw(&mut p, 0.3, &mut g);
    let x = uniform(&[1, 3, 16, 16], -0.9, 0.9, &mut g);
    let w = uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut g);
    let grads = probe::generator(&x, &spec, &p, &w).unwrap();
    let r = finite_difference_check(&x, &p, &grads, 6, H, FLOOR, |x, p| {
        Ok(weighted(&generator_forward(x, &spec, p)?, &w))
    })
    .unwrap();
    assert_close("generator", &r);
}

#[test]
fn discriminator_gradients() {
    let mut g = rng(3);
    let spec = DiscriminatorSpec {
        filters: vec![2, 4, 4, 4, 4, 1],
        ..DiscriminatorSpec::default()
    };
    let mut p = spec.init(&mut g).unwrap();
    redraw(&mut p, 0.3, &mut g);
    let x = uniform(&[1, 3, 64, 64], -1.0, 1.0, &mut g);
    let out = discriminator_forward(&x, &spec, &p).unwrap();
    let w = uniform(out.shape(), -1.0, 1.0, &mut g);
    let grads = probe::discriminator(&x, &spec, &p, &w).unwrap();
    let r = finite_difference_check(&x, &p, &grads, 6, H, FLOOR, |x, p| {
        Ok(weighted(&discriminator_forward(x, &spec, p)?, &w))
    })
    .unwrap();
    assert_close("discriminator", &r);
}

#[test]
fn unet_gradients() {
    let mut g = rng(4);
    let spec = UNetSpec {
        base_filters: 4,
        cbam: CbamSpec {
            reduction_ratio: 4,
            spatial_kernel: 3,
        },
        ..UNetSpec::default()
    };
    let mut p = spec.init(&mut g).unwrap();
    redraw(&mut p, 0.3, &mut g);
    let x = uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut g);
    let w = uniform(&[1, 1, 32, 32], -1.0, 1.0, &mut g);
    let grads = probe::unet_logits(&x, &spec, &p, &w).unwrap();
    let r = finite_difference_check(&x, &p, &grads, 4, H, FLOOR, |x, p| {
        Ok(weighted(&probe::unet_logits_forward(x, &spec, p)?, &w))
    })
    .unwrap();
    assert_close("unet", &r);
}

/// Loss gradients through the tape ops the trainer uses, against central
/// differences of the public loss functions, at points away from the L1 kink.
#[test]
fn loss_gradients() {
    use fundus::losses::{adv_loss_discriminator, adv_loss_generator, cycle_consistency_loss};
    let mut g = rng(5);
    let real = uniform(&[1, 1, 3, 3], -1.0, 2.0, &mut g);
    let fake = uniform(&[1, 1, 3, 3], -1.0, 2.0, &mut g);
    let x = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut g);
    let offset = |t: &Tensor, rng: &mut ChaCha8Rng| {
        let mut o = t.clone();
        for v in o.data_mut() {
            let d: f64 = rng.random_range(0.1..0.5);
            *v += if rng.random::<bool>() { d } else { -d };
        }
        o
    };
    let xc = offset(&x, &mut g);
    let y = uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut g);
    let yc = offset(&y, &mut g);

    let numeric = |f: &dyn Fn(&Tensor) -> f64, t: &Tensor| -> Vec<f64> {
        (0..t.len())
            .map(|i| {
                let (mut p, mut m) = (t.clone(), t.clone());
                p.data_mut()[i] += H;
                m.data_mut()[i] -= H;
                (f(&p) - f(&m)) / (2.0 * H)
            })
            .collect()
    };
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: &Tensor, numeric: Vec<f64>| {
        for (a, n) in analytic.data().iter().zip(numeric) {
            worst = worst.max(probe::rel_error(*a, n, 1e-8));
        }
    };

    let mut tape = Tape::new();
    let r = tape.leaf(real.clone(), true);
    let f = tape.leaf(fake.clone(), true);
    let lr = tape.mse_to(r, 1.0);
    let lf = tape.mse_to(f, 0.0);
    let d = tape.add(lr, lf).unwrap();
    assert!((tape.value(d).item() - adv_loss_discriminator(&real, &fake).unwrap()).abs() < 1e-12);
    let gd = tape.backward(d).unwrap();
    compare(
        &gd.get(r),
        numeric(&|t| adv_loss_discriminator(t, &fake).unwrap(), &real),
    );
    compare(
        &gd.get(f),
        numeric(&|t| adv_loss_discriminator(&real, t).unwrap(), &fake),
    );

    let mut tape = Tape::new();
    let f = tape.leaf(fake.clone(), true);
    let l = tape.mse_to(f, 1.0);
    assert!((tape.value(l).item() - adv_loss_generator(&fake).unwrap()).abs() < 1e-12);
    let gg = tape.backward(l).unwrap();
    compare(&gg.get(f), numeric(&|t| adv_loss_generator(t).unwrap(), &fake));

    let mut tape = Tape::new();
    let vars: Vec<_> = [&x, &xc, &y, &yc]
        .iter()
        .map(|t| tape.leaf((*t).clone(), true))
        .collect();
    let a = tape.mean_abs_diff(vars[0], vars[1]).unwrap();
    let b = tape.mean_abs_diff(vars[2], vars[3]).unwrap();
    let c = tape.add(a, b).unwrap();
    assert!((tape.value(c).item() - cycle_consistency_loss(&x, &xc, &y, &yc).unwrap()).abs() < 1e-12);
    let gc = tape.backward(c).unwrap();
    compare(
        &gc.get(vars[0]),
        numeric(&|t| cycle_consistency_loss(t, &xc, &y, &yc).unwrap(), &x),
    );
    compare(
        &gc.get(vars[1]),
        numeric(&|t| cycle_consistency_loss(&x, t, &y, &yc).unwrap(), &xc),
    );
    compare(
        &gc.get(vars[3]),
        numeric(&|t| cycle_consistency_loss(&x, &xc, &y, t).unwrap(), &yc),
    );
    println!("losses: max rel error {worst:.3e}");
    assert!(worst < 1e-6, "{worst}");
}
