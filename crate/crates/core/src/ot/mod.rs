//! Batched 1-of-2^m oblivious transfer with two interchangeable backends.
//!
//! Both parties own an [`OtEngine`] and call [`OtEngine::send`] /
//! [`OtEngine::receive`] in the same order; each call is one batch.

mod base;
mod dealer;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{ensure, Error, Result};
use crate::transport::codec::Reader;
use crate::transport::Session;

pub const MAX_CHOICE_BITS: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OtBackend {
    /// Correlations expanded from a seed both parties know. Correct but
    /// offers no privacy against the parties themselves; for tests and
    /// benchmarks of everything except OT cost.
    Dealer,
    /// Fresh Chou-Orlandi base OTs for every instance.
    Base,
}

impl OtBackend {
    pub fn tag(self) -> u8 {
        match self {
            OtBackend::Dealer => 0,
            OtBackend::Base => 1,
        }
    }

    /// Byte width of serialized group elements.
    pub fn group_element_width(self) -> u8 {
        match self {
            OtBackend::Dealer => 0,
            OtBackend::Base => 32,
        }
    }
}

impl std::str::FromStr for OtBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dealer" => Ok(OtBackend::Dealer),
            "base" => Ok(OtBackend::Base),
            _ => Err(Error::Config(format!("unknown OT backend {s:?}"))),
        }
    }
}

/// Shape of one batch: `count` transfers of one out of `2^choice_bits`
/// messages of `width` bits each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OtRequest {
    pub choice_bits: u32,
    pub width: u32,
    pub count: usize,
}

impl OtRequest {
    pub fn new(choice_bits: u32, width: u32, count: usize) -> Result<Self> {
        let r = OtRequest {
            choice_bits,
            width,
            count,
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            (1..=MAX_CHOICE_BITS).contains(&self.choice_bits),
            Error::Params(format!("1-of-2^{} OT unsupported", self.choice_bits))
        );
        ensure!(
            (1..=64).contains(&self.width),
            Error::Params(format!("message width {} outside 1..=64", self.width))
        );
        ensure!(self.count > 0, Error::Params("empty OT batch".into()));
        Ok(())
    }

    pub fn messages_per_instance(&self) -> usize {
        1 << self.choice_bits
    }

    fn width_mask(&self) -> u64 {
        crate::ring::mask(self.width)
    }

    fn header(&self) -> Vec<u8> {
        let mut h = vec![self.choice_bits as u8, self.width as u8];
        h.extend_from_slice(&(self.count as u64).to_le_bytes());
        h
    }

    fn check_header(&self, r: &mut Reader) -> Result<()> {
        let m = r.u8()? as u32;
        let w = r.u8()? as u32;
        let n = r.u64()? as usize;
        ensure!(
            (m, w, n) == (self.choice_bits, self.width, self.count),
            Error::Desync(format!(
                "OT request mismatch: peer (m={m}, w={w}, n={n}), local {self:?}"
            ))
        );
        Ok(())
    }
}

pub struct OtEngine {
    backend: OtBackend,
    dealer_seed: u64,
    batches: u64,
    rng: ChaCha20Rng,
}

impl OtEngine {
    /// `dealer_seed` must be equal on both sides; `local_seed` is private.
    pub fn new(backend: OtBackend, dealer_seed: u64, local_seed: u64) -> Self {
        OtEngine {
            backend,
            dealer_seed,
            batches: 0,
            rng: ChaCha20Rng::seed_from_u64(local_seed),
        }
    }

    pub fn backend(&self) -> OtBackend {
        self.backend
    }

    /// Act as sender. `messages` holds `2^m` entries per instance.
    pub fn send(&mut self, sess: &mut Session, req: OtRequest, messages: &[u64]) -> Result<()> {
        req.validate()?;
        ensure!(
            messages.len() == req.count * req.messages_per_instance(),
            Error::Shape(format!(
                "{} OT messages for {} instances of 1-of-{}",
                messages.len(),
                req.count,
                req.messages_per_instance()
            ))
        );
        let batch = self.batches;
        self.batches += 1;
        match self.backend {
            OtBackend::Dealer => dealer::send(sess, req, messages, self.dealer_seed, batch),
            OtBackend::Base => base::send(sess, req, messages, batch, &mut self.rng),
        }
    }

    /// Act as receiver; returns the chosen message per instance.
    pub fn receive(&mut self, sess: &mut Session, req: OtRequest, choices: &[u64]) -> Result<Vec<u64>> {
        req.validate()?;
        ensure!(
            choices.len() == req.count,
            Error::Shape(format!("{} choices for {} instances", choices.len(), req.count))
        );
        let k = req.messages_per_instance() as u64;
        if let Some(&bad) = choices.iter().find(|&&c| c >= k) {
            return Err(Error::Range(bad));
        }
        let batch = self.batches;
        self.batches += 1;
        match self.backend {
            OtBackend::Dealer => dealer::receive(sess, req, choices, self.dealer_seed, batch),
            OtBackend::Base => base::receive(sess, req, choices, batch, &mut self.rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::memory_pair;
    use rand::Rng;
    use std::thread;

    fn run(backend: OtBackend, req: OtRequest, msgs: Vec<u64>, choices: Vec<u64>) -> Vec<u64> {
        let (mut a, mut b) = memory_pair();
        let t = thread::spawn(move || {
            let mut e = OtEngine::new(backend, 9, 1);
            e.send(&mut a, req, &msgs).unwrap();
        });
        let mut e = OtEngine::new(backend, 9, 2);
        let out = e.receive(&mut b, req, &choices).unwrap();
        t.join().unwrap();
        out
    }

    #[test]
    fn one_of_two_trivial() {
        for backend in [OtBackend::Dealer, OtBackend::Base] {
            let req = OtRequest::new(1, 64, 1).unwrap();
            assert_eq!(run(backend, req, vec![111, 222], vec![0]), vec![111]);
            assert_eq!(run(backend, req, vec![111, 222], vec![1]), vec![222]);
        }
    }

    #[test]
    fn one_of_sixteen_exhaustive() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 1000;
        let msgs: Vec<u64> = (0..n).flat_map(|_| 0..16u64).collect();
        let choices: Vec<u64> = (0..n).map(|_| rng.random_range(0..16)).collect();
        let req = OtRequest::new(4, 4, n).unwrap();
        for backend in [OtBackend::Dealer, OtBackend::Base] {
            assert_eq!(run(backend, req, msgs.clone(), choices.clone()), choices);
        }
    }

    #[test]
    fn large_one_of_two_batch_and_backend_equivalence() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let n = 10_000;
        let msgs: Vec<u64> = (0..2 * n).map(|_| rng.random::<u64>() >> 5).collect();
        let choices: Vec<u64> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let expect: Vec<u64> = (0..n).map(|i| msgs[2 * i + choices[i] as usize]).collect();
        let req = OtRequest::new(1, 59, n).unwrap();
        let dealer = run(OtBackend::Dealer, req, msgs.clone(), choices.clone());
        assert_eq!(dealer, expect);
        let base = run(OtBackend::Base, OtRequest::new(1, 59, 500).unwrap(), msgs[..1000].to_vec(), choices[..500].to_vec());
        assert_eq!(base, dealer[..500]);
    }

    #[test]
    fn mismatched_requests_fail() {
        let (mut a, mut b) = memory_pair();
        let t = thread::spawn(move || {
            let mut e = OtEngine::new(OtBackend::Dealer, 1, 1);
            e.send(&mut a, OtRequest::new(1, 8, 2).unwrap(), &[0; 4])
        });
        let mut e = OtEngine::new(OtBackend::Dealer, 1, 2);
        let r = e.receive(&mut b, OtRequest::new(1, 8, 3).unwrap(), &[0; 3]);
        // the receiver speaks first; the sender detects the mismatch
        assert!(r.is_err() || t.join().unwrap().is_err());
    }

    #[test]
    fn request_limits() {
        assert!(OtRequest::new(9, 8, 1).is_err());
        assert!(OtRequest::new(1, 8, 0).is_err());
        assert!(OtRequest::new(1, 65, 1).is_err());
    }
}
