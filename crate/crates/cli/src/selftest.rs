//! Fast oracle checks of every building block at reduced sizes.

use std::time::Instant;

use duet_core::bfv::modulus::Modulus;
use duet_core::bfv::ntt::{negacyclic_mul_naive, NttTable};
use duet_core::bfv::{self, BfvContext, BfvParams, PlainMultiplier, Plaintext};
use duet_core::encoding::{matmul, MatmulGeometry, Operand};
use duet_core::linear::{sample_dp_noise, DpConfig};
use duet_core::nn::{
    data_owner_step, model_owner_step, train_step, LayerSpec, LinearMode, Model, ModelSpec, Network, Private, Reference,
    TrainConfig,
};
use duet_core::nonlinear::TruncMode;
use duet_core::ot::OtBackend;
use duet_core::party::{local_pair, run_both};
use duet_core::privacy::hardness_estimate;
use duet_core::ring::{mask, matmul_raw, RingParams, RingTensor};
use duet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use crate::opts::SelftestArgs;
use crate::report::Report;

/// Negacyclic product over Z_{2^bits} by the schoolbook rule.
fn negacyclic_pow2(a: &[u64], b: &[u64], bits: u32) -> Vec<u64> {
    let n = a.len();
    let mut out = vec![0u64; n];
    for i in 0..n {
        for j in 0..n {
            let p = a[i].wrapping_mul(b[j]);
            if i + j < n {
                out[i + j] = out[i + j].wrapping_add(p);
            } else {
                out[i + j - n] = out[i + j - n].wrapping_sub(p);
            }
        }
    }
    out.iter().map(|v| v & mask(bits)).collect()
}

fn ntt_matches_schoolbook(rng: &mut ChaCha20Rng) -> Result<bool> {
    let q = bfv::params::DEFAULT_MODULI[0];
    let m = Modulus::new(q)?;
    let mut n = 4;
    while n <= 256 {
        let t = NttTable::new(n, m)?;
        let a: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
        let b: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
        let (mut fa, mut fb) = (a.clone(), b.clone());
        t.forward(&mut fa);
        t.forward(&mut fb);
        let mut prod: Vec<u64> = fa.iter().zip(&fb).map(|(&x, &y)| m.mul(x, y)).collect();
        t.inverse(&mut prod);
        if prod != negacyclic_mul_naive(&a, &b, &m) {
            return Ok(false);
        }
        n *= 2;
    }
    Ok(true)
}

fn bfv_roundtrips(rng: &mut ChaCha20Rng) -> Result<bool> {
    let ctx = BfvContext::new(BfvParams::small())?;
    let (sk, pk) = bfv::keygen(&ctx, rng);
    let bits = ctx.plain_bits();
    for _ in 0..3 {
        let a: Vec<u64> = (0..ctx.degree()).map(|_| rng.random::<u64>() & mask(bits)).collect();
        let b: Vec<u64> = (0..ctx.degree()).map(|_| rng.random::<u64>() & mask(bits)).collect();
        // sparse multiplier keeps the schoolbook oracle cheap
        let mut w = vec![0u64; ctx.degree()];
        for _ in 0..8 {
            w[rng.random_range(0..ctx.degree())] = rng.random::<u64>() & mask(bits);
        }
        let ca = bfv::encrypt(&ctx, &pk, &Plaintext::new(&ctx, a.clone())?, rng)?;
        let cb = bfv::encrypt(&ctx, &pk, &Plaintext::new(&ctx, b.clone())?, rng)?;
        let sum = bfv::decrypt(&ctx, &sk, &bfv::add(&ctx, &ca, &cb)?)?;
        let expect_sum: Vec<u64> = a.iter().zip(&b).map(|(x, y)| x.wrapping_add(*y) & mask(bits)).collect();
        let pm = PlainMultiplier::new(&ctx, &Plaintext::new(&ctx, w.clone())?);
        let prod = bfv::decrypt(&ctx, &sk, &bfv::mul_plain(&ctx, &ca, &pm)?)?;
        if sum.coeffs != expect_sum || prod.coeffs != negacyclic_pow2(&w, &a, bits) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn packing_identity(rng: &mut ChaCha20Rng) -> Result<bool> {
    let bits = 59;
    for _ in 0..20 {
        let g = MatmulGeometry::new(rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..4));
        let degree = g.coefficients().next_power_of_two();
        let w: Vec<u64> = (0..g.weight_len()).map(|_| rng.random::<u64>() & mask(bits)).collect();
        let v: Vec<u64> = (0..g.input_len()).map(|_| rng.random::<u64>() & mask(bits)).collect();
        let pw = matmul::encode(Operand::Weight, &w, &g, degree)?;
        let pv = matmul::encode(Operand::Input, &v, &g, degree)?;
        let y = matmul::decode(&negacyclic_pow2(&pw, &pv, bits), &g)?;
        if y != matmul_raw(&w, &v, g.out, g.inner, g.batch, mask(bits)) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn private_step_matches_reference(seed: u64) -> Result<bool> {
    let ring = RingParams::small();
    let spec = ModelSpec::new(
        "selftest",
        vec![1, 4, 4],
        vec![
            LayerSpec::Flatten,
            LayerSpec::dense(16, 8),
            LayerSpec::Relu,
            LayerSpec::dense(8, 3),
        ],
    )?;
    let b = 4;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..b * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = RingTensor::encode(&ring, &[b, 1, 4, 4], &xs, ring.frac_bits)?;
    let labels: Vec<u8> = (0..b).map(|_| rng.random_range(0..3)).collect();
    let mut model = Model::init(spec.clone(), seed)?;
    let net = model.quantize(&ring)?;
    let mut reference = Reference::new(ring, DpConfig::disabled(), 0);
    let expect = train_step(&mut reference, &net, Some((&x, &labels)), b)?;

    let (mut mo, mut dataowner) = local_pair(ring, OtBackend::Dealer, seed);
    let (r0, r1) = run_both(&mut mo, &mut dataowner, |p| p.setup_he(BfvParams::small()));
    r0?;
    r1?;
    let peer = Network::peer(spec)?;
    let cfg = TrainConfig { batch: b, ..Default::default() };
    let mut me = Private::new(&mut mo, LinearMode::FullHe, TruncMode::Faithful, DpConfig::disabled());
    let mut de = Private::new(&mut dataowner, LinearMode::FullHe, TruncMode::Faithful, DpConfig::disabled());
    let (got, theirs) = std::thread::scope(|s| {
        let h = s.spawn(|| data_owner_step(&mut de, &peer, &x, &labels));
        let got = model_owner_step(&mut me, &mut model, &cfg);
        (got, h.join().expect("data owner thread"))
    });
    let (got, theirs) = (got?, theirs?);
    Ok(got.grads == expect.grads && theirs.loss == expect.loss)
}

fn hardness_table() -> Result<bool> {
    let want = [
        (2, 10, "m=2 f=10: 20 bits, <512, 62.1 seconds"),
        (2, 25, "m=2 f=25: 50 bits, <512, 2114 years"),
        (4, 25, "m=4 f=25: 100 bits, ~2048, 2.38e18 years"),
        (8, 25, "m=8 f=25: 200 bits, ~7680, 3.02e48 years"),
    ];
    for (m, f, line) in want {
        if hardness_estimate(m, f)?.to_string() != line {
            return Ok(false);
        }
    }
    Ok(true)
}

fn dp_noise_scale(rng: &mut ChaCha20Rng) -> Result<bool> {
    let dp = DpConfig::new(0.01, 8.0, 64)?;
    let draws = sample_dp_noise(200_000, &dp, rng);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    Ok((var.sqrt() / dp.std_dev() - 1.0).abs() < 0.05)
}

pub fn run(a: &SelftestArgs) -> Result<bool> {
    let mut rng = ChaCha20Rng::seed_from_u64(a.seed);
    let mut rep = Report::new("selftest", a.out.as_deref());
    let mut all = true;
    let mut results = Vec::new();
    let mut check = |name: &str, f: &mut dyn FnMut() -> Result<bool>| {
        let start = Instant::now();
        let ok = match f() {
            Ok(ok) => ok,
            Err(e) => {
                eprintln!("{name}: {e}");
                false
            }
        };
        let ms = start.elapsed().as_secs_f64() * 1e3;
        println!("selftest {name} {} ({ms:.0} ms)", if ok { "pass" } else { "FAIL" });
        all &= ok;
        results.push(json!({ "name": name, "pass": ok, "ms": ms }));
    };
    check("ntt_vs_schoolbook", &mut || ntt_matches_schoolbook(&mut rng));
    let mut rng2 = rng.clone();
    check("bfv_roundtrip", &mut || bfv_roundtrips(&mut rng2));
    check("packing_identity", &mut || packing_identity(&mut rng));
    check("private_step_vs_reference", &mut || private_step_matches_reference(a.seed));
    check("hardness_table", &mut hardness_table);
    check("dp_noise_scale", &mut || dp_noise_scale(&mut rng));
    rep.set("pass", all);
    rep.set_quiet("checks", results);
    rep.finish(json!({ "command": "selftest", "config": { "seed": a.seed }, "seeds": { "rng": a.seed }, "digests": {}, "outputs": [] }))?;
    Ok(all)
}
