//! Mask banks: correlated randomness for one bilinear operator, produced
//! with homomorphic encryption before training and consumed without it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::encoding::{Encrypted, Operand, Tiling};
use crate::error::{ensure, Error, Result};
use crate::linear::ops::{Bilinear, ConvShape, LinearShape, OpKind};
use crate::linear::{add_raw, plain_tiles, recv_encrypted, recv_masked, send_encrypted, send_masked, Term};
use crate::party::Party;
use crate::ring::Role;
use crate::transport::msg;

const MAGIC: &[u8; 4] = b"PBNK";
const VERSION: u16 = 1;

/// The four operators a linear layer needs during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatorId {
    /// `W` (model owner) with `X` (data owner).
    Forward,
    /// `W` with the output gradient.
    BackwardInput,
    /// Output gradient (model owner) with `X` (data owner).
    GradWeight,
    /// `X` (model owner) with the output gradient (data owner): the weight
    /// gradient map with its operands swapped.
    GradWeightRev,
}

impl OperatorId {
    pub const ALL: [OperatorId; 4] = [
        OperatorId::Forward,
        OperatorId::BackwardInput,
        OperatorId::GradWeight,
        OperatorId::GradWeightRev,
    ];

    pub fn tag(self) -> u8 {
        match self {
            OperatorId::Forward => 0,
            OperatorId::BackwardInput => 1,
            OperatorId::GradWeight => 2,
            OperatorId::GradWeightRev => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        OperatorId::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown operator id {tag}")))
    }

    fn kind(self) -> OpKind {
        match self {
            OperatorId::Forward => OpKind::Forward,
            OperatorId::BackwardInput => OpKind::BackwardInput,
            OperatorId::GradWeight | OperatorId::GradWeightRev => OpKind::GradWeight,
        }
    }

    /// Slot of the bilinear map filled by the model owner's operand.
    fn mo_slot(self) -> Operand {
        match self {
            OperatorId::GradWeightRev => Operand::Input,
            _ => Operand::Weight,
        }
    }
}

/// An operator `u o v` with `u` from the model owner and `v` from the data owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Operator {
    pub id: OperatorId,
    pub map: Bilinear,
}

impl Operator {
    pub fn new(id: OperatorId, shape: LinearShape, batch: usize) -> Result<Self> {
        Ok(Operator {
            id,
            map: Bilinear::new(id.kind(), shape, batch)?,
        })
    }

    pub fn mo_slot(&self) -> Operand {
        self.id.mo_slot()
    }

    pub fn do_slot(&self) -> Operand {
        match self.mo_slot() {
            Operand::Weight => Operand::Input,
            Operand::Input => Operand::Weight,
        }
    }

    pub fn u_len(&self) -> usize {
        self.map.operand_len(self.mo_slot())
    }

    pub fn v_len(&self) -> usize {
        self.map.operand_len(self.do_slot())
    }

    pub fn result_len(&self) -> usize {
        self.map.result_len()
    }

    pub fn eval(&self, u: &[u64], v: &[u64], mask: u64) -> Result<Vec<u64>> {
        match self.mo_slot() {
            Operand::Weight => self.map.eval(u, v, mask),
            Operand::Input => self.map.eval(v, u, mask),
        }
    }
}

/// How the online scalars `k_i`, `l_j` are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScalarMode {
    /// Uniform nonzero ring elements.
    Uniform,
    /// `(2j+1)^n` for the n-th call: odd, hence units, and full rank over any m calls.
    Vandermonde,
}

impl std::str::FromStr for ScalarMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScalarMode::Uniform),
            "vandermonde" => Ok(ScalarMode::Vandermonde),
            _ => Err(Error::Config(format!("unknown scalar mode {s:?}"))),
        }
    }
}

/// One party's half of a mask bank.
///
/// The model owner stores its masks `u'_i` and `s_ij`; the data owner stores
/// `v'_j` and `u'_i o v'_j - s_ij`. `cross` is indexed `i * m + j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBank {
    pub role: Role,
    pub op: Operator,
    pub ell: u32,
    pub masks: Vec<Vec<u64>>,
    pub cross: Vec<Vec<u64>>,
    pub used: u64,
    /// Online calls after which every further call logs a warning.
    pub reuse_cap: Option<u64>,
    pub scalars: ScalarMode,
}

impl MaskBank {
    pub fn m(&self) -> usize {
        self.masks.len()
    }

    /// Scalars for the next online call.
    pub(crate) fn draw_scalars<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u64> {
        let mask = crate::ring::mask(self.ell);
        match self.scalars {
            ScalarMode::Uniform => (0..self.m())
                .map(|_| loop {
                    let v = rng.random::<u64>() & mask;
                    if v != 0 {
                        break v;
                    }
                })
                .collect(),
            ScalarMode::Vandermonde => {
                let n = self.used + 1;
                (0..self.m() as u64)
                    .map(|j| pow_mod(2 * j + 1, n, mask))
                    .collect()
            }
        }
    }

    pub(crate) fn record_use(&mut self) {
        self.used += 1;
        if let Some(cap) = self.reuse_cap {
            if self.used > cap {
                log::warn!(
                    "{:?} mask bank used {} times, above the configured cap of {cap}",
                    self.op.id,
                    self.used
                );
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(VERSION)?;
        w.write_u8(self.role.index() as u8)?;
        w.write_u8(self.op.id.tag())?;
        write_shape(w, &self.op.map.shape)?;
        w.write_u64::<LittleEndian>(self.op.map.batch as u64)?;
        w.write_u32::<LittleEndian>(self.ell)?;
        w.write_u32::<LittleEndian>(self.m() as u32)?;
        w.write_u64::<LittleEndian>(self.used)?;
        w.write_u64::<LittleEndian>(self.reuse_cap.unwrap_or(u64::MAX))?;
        w.write_u8(match self.scalars {
            ScalarMode::Uniform => 0,
            ScalarMode::Vandermonde => 1,
        })?;
        for block in self.masks.iter().chain(&self.cross) {
            for &v in block {
                w.write_u64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Load a bank and check it serves `expected` for `role`.
    pub fn load(path: &Path, role: Role, expected: &Operator) -> Result<MaskBank> {
        let bank = MaskBank::read_from(&mut BufReader::new(File::open(path)?))?;
        ensure!(
            bank.role == role && bank.op == *expected,
            Error::Format(format!(
                "bank in {} is for {:?} {:?}, expected {:?} {:?}",
                path.display(),
                bank.role,
                bank.op,
                role,
                expected
            ))
        );
        Ok(bank)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<MaskBank> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        ensure!(&magic == MAGIC, Error::Format("not a mask bank file".into()));
        let version = r.read_u16::<LittleEndian>()?;
        ensure!(version == VERSION, Error::Format(format!("mask bank version {version}")));
        let role = match r.read_u8()? {
            0 => Role::ModelOwner,
            1 => Role::DataOwner,
            x => return Err(Error::Format(format!("role tag {x}"))),
        };
        let id = OperatorId::from_tag(r.read_u8()?)?;
        let shape = read_shape(r)?;
        let batch = r.read_u64::<LittleEndian>()? as usize;
        let ell = r.read_u32::<LittleEndian>()?;
        ensure!((2..=63).contains(&ell), Error::Format(format!("ring width {ell}")));
        let m = r.read_u32::<LittleEndian>()? as usize;
        ensure!((1..=1 << 12).contains(&m), Error::Format(format!("mask count {m}")));
        let used = r.read_u64::<LittleEndian>()?;
        let cap = r.read_u64::<LittleEndian>()?;
        let scalars = match r.read_u8()? {
            0 => ScalarMode::Uniform,
            1 => ScalarMode::Vandermonde,
            x => return Err(Error::Format(format!("scalar mode {x}"))),
        };
        let op = Operator::new(id, shape, batch).map_err(|e| Error::Format(e.to_string()))?;
        let (mask_len, result_len) = match role {
            Role::ModelOwner => (op.u_len(), op.result_len()),
            Role::DataOwner => (op.v_len(), op.result_len()),
        };
        let mut block = |len: usize| -> Result<Vec<u64>> {
            let mut v = vec![0u64; len];
            r.read_u64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let masks = (0..m).map(|_| block(mask_len)).collect::<Result<Vec<_>>>()?;
        let cross = (0..m * m).map(|_| block(result_len)).collect::<Result<Vec<_>>>()?;
        let mut rest = [0u8; 1];
        ensure!(r.read(&mut rest)? == 0, Error::Format("trailing bytes after mask bank".into()));
        Ok(MaskBank {
            role,
            op,
            ell,
            masks,
            cross,
            used,
            reuse_cap: (cap != u64::MAX).then_some(cap),
            scalars,
        })
    }
}

fn write_shape<W: Write>(w: &mut W, shape: &LinearShape) -> Result<()> {
    match shape {
        LinearShape::Dense { inputs, outputs } => {
            w.write_u8(0)?;
            for v in [*inputs, *outputs] {
                w.write_u64::<LittleEndian>(v as u64)?;
            }
        }
        LinearShape::Conv(c) => {
            w.write_u8(1)?;
            for v in [c.c_in, c.c_out, c.kernel, c.stride, c.padding, c.size] {
                w.write_u64::<LittleEndian>(v as u64)?;
            }
        }
    }
    Ok(())
}

fn read_shape<R: Read>(r: &mut R) -> Result<LinearShape> {
    let kind = r.read_u8()?;
    let mut next = || -> Result<usize> { Ok(r.read_u64::<LittleEndian>()? as usize) };
    match kind {
        0 => Ok(LinearShape::Dense {
            inputs: next()?,
            outputs: next()?,
        }),
        1 => Ok(LinearShape::Conv(ConvShape {
            c_in: next()?,
            c_out: next()?,
            kernel: next()?,
            stride: next()?,
            padding: next()?,
            size: next()?,
        })),
        x => Err(Error::Format(format!("layer kind tag {x}"))),
    }
}

fn pow_mod(base: u64, mut exp: u64, mask: u64) -> u64 {
    let mut acc = 1u64;
    let mut b = base & mask;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc.wrapping_mul(b) & mask;
        }
        b = b.wrapping_mul(b) & mask;
        exp >>= 1;
    }
    acc
}

/// Offline phase: the data owner encrypts its `m` masks, the model owner
/// returns `m^2` masked products. Frames are tagged with `tag`.
pub fn prep_operator(p: &mut Party, op: Operator, m: usize, tag: u16, scalars: ScalarMode) -> Result<MaskBank> {
    ensure!(m >= 1, Error::Config("mask count must be at least 1".into()));
    let degree = p.he()?.ctx.degree();
    let ell = p.ring.ell;
    let mask = p.mask();
    let tiling = Tiling::plan(
        op.map.kernel,
        degree,
        Encrypted {
            weight: op.do_slot() == Operand::Weight,
            input: op.do_slot() == Operand::Input,
        },
    )?;
    p.session.set_tag(tag);
    let mut cross = Vec::with_capacity(m * m);
    let masks: Vec<Vec<u64>>;
    if p.is_mo() {
        masks = (0..m)
            .map(|_| (0..op.u_len()).map(|_| p.rng.random::<u64>() & mask).collect())
            .collect();
        let mut cts = Vec::with_capacity(m);
        for _ in 0..m {
            cts.push(recv_encrypted(p, &tiling, op.do_slot(), msg::PREP_INPUT_CT)?);
        }
        for u in &masks {
            let plain = plain_tiles(p, &tiling, op.mo_slot(), &op.map.prepare(op.mo_slot(), u)?)?;
            for ct in &cts {
                let term = Term {
                    enc_slot: op.do_slot(),
                    cts: ct,
                    plain: &plain,
                };
                let s = send_masked(p, &tiling, &[term], msg::PREP_MASKED_CT)?;
                cross.push(op.map.finish(&s)?);
            }
        }
    } else {
        masks = (0..m)
            .map(|_| (0..op.v_len()).map(|_| p.rng.random::<u64>() & mask).collect())
            .collect();
        for v in &masks {
            send_encrypted(p, &tiling, op.do_slot(), &op.map.prepare(op.do_slot(), v)?, msg::PREP_INPUT_CT)?;
        }
        for _ in 0..m * m {
            cross.push(op.map.finish(&recv_masked(p, &tiling, msg::PREP_MASKED_CT)?)?);
        }
    }
    Ok(MaskBank {
        role: p.role,
        op,
        ell,
        masks,
        cross,
        used: 0,
        reuse_cap: None,
        scalars,
    })
}

fn combine(acc: &mut [u64], k: u64, v: &[u64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a = a.wrapping_add(k.wrapping_mul(*b));
    }
}

/// Online phase: shares of `u o v` from the model owner's `u` and the data
/// owner's `v` in one round, with no homomorphic operations.
pub fn online_shared_product(p: &mut Party, bank: &mut MaskBank, operand: &[u64], tag: u16) -> Result<Vec<u64>> {
    ensure!(
        bank.role == p.role && bank.ell == p.ring.ell,
        Error::Config("mask bank belongs to another party or ring".into())
    );
    let op = bank.op;
    let (own_len, peer_len) = match p.role {
        Role::ModelOwner => (op.u_len(), op.v_len()),
        Role::DataOwner => (op.v_len(), op.u_len()),
    };
    ensure!(
        operand.len() == own_len,
        Error::Shape(format!("operand of {} entries, bank expects {own_len}", operand.len()))
    );
    let mask = p.mask();
    let m = bank.m();
    let scalars = bank.draw_scalars(&mut p.rng);
    let mut masked = operand.to_vec();
    for (k, mk) in scalars.iter().zip(&bank.masks) {
        for (a, b) in masked.iter_mut().zip(mk) {
            *a = a.wrapping_sub(k.wrapping_mul(*b)) & mask;
        }
    }
    let mut payload = scalars.clone();
    payload.extend_from_slice(&masked);
    p.session.set_tag(tag);
    let (send_kind, recv_kind) = match p.role {
        Role::ModelOwner => (msg::ONLINE_MO_MASKED, msg::ONLINE_DO_MASKED),
        Role::DataOwner => (msg::ONLINE_DO_MASKED, msg::ONLINE_MO_MASKED),
    };
    p.session.send(send_kind, crate::transport::codec::u64s_to_bytes(&payload))?;
    let theirs = crate::transport::codec::bytes_to_u64s(&p.session.recv(recv_kind)?)?;
    ensure!(
        theirs.len() == m + peer_len,
        Error::Desync("online message length does not match the bank".into())
    );
    let (peer_scalars, peer_masked) = theirs.split_at(m);
    let out_len = op.result_len();
    let mut share = match p.role {
        Role::ModelOwner => {
            // u o v~ + sum_j l_j sum_i k_i s_ij
            let mut share = op.eval(operand, peer_masked, mask)?;
            for (j, &l) in peer_scalars.iter().enumerate() {
                let mut inner = vec![0u64; out_len];
                for (i, &k) in scalars.iter().enumerate() {
                    combine(&mut inner, k, &bank.cross[i * m + j]);
                }
                combine(&mut share, l, &inner);
            }
            share
        }
        Role::DataOwner => {
            // sum_j l_j (u~ o v'_j + sum_i k_i D_ij)
            let mut share = vec![0u64; out_len];
            for (j, &l) in scalars.iter().enumerate() {
                let mut inner = op.eval(peer_masked, &bank.masks[j], mask)?;
                for (i, &k) in peer_scalars.iter().enumerate() {
                    combine(&mut inner, k, &bank.cross[i * m + j]);
                }
                combine(&mut share, l, &inner);
            }
            share
        }
    };
    share.iter_mut().for_each(|v| *v &= mask);
    bank.record_use();
    Ok(share)
}

/// Check the bank invariant `s_ij + D_ij = u'_i o v'_j` given both halves.
pub fn banks_consistent(mo: &MaskBank, dataowner: &MaskBank) -> Result<bool> {
    let mask = crate::ring::mask(mo.ell);
    let m = mo.m();
    for i in 0..m {
        for j in 0..m {
            let mut sum = mo.cross[i * m + j].clone();
            add_raw(&mut sum, &dataowner.cross[i * m + j], mask);
            if sum != mo.op.eval(&mo.masks[i], &dataowner.masks[j], mask)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
