//! Arithmetic over `Z_{2^l}` and `Z_2`, additive sharing, and the local
//! (non-interactive) share operations.
//!
//! The ring width is a type parameter: [`RingWord`] is implemented for `u8`,
//! `u16`, `u32` and `u64`. Production code runs on `u64` (see [`Ring`]); the
//! narrow widths exist so that comparison circuits can be checked
//! exhaustively.

use std::fmt::Debug;
use std::hash::Hash;

use rand::Rng;

use crate::error::{Error, Result};

/// The ring element type used by the query engine (`l = 64`).
pub type Ring = u64;

/// An unsigned machine word interpreted as an element of `Z_{2^BITS}`.
pub trait RingWord:
    Copy + Clone + Eq + Ord + Hash + Debug + Default + Send + Sync + 'static
{
    const BITS: u32;
    const BYTES: usize;
    const ZERO: Self;
    const ONE: Self;

    fn add(self, rhs: Self) -> Self;
    fn sub(self, rhs: Self) -> Self;
    fn mul(self, rhs: Self) -> Self;
    fn neg(self) -> Self;

    /// Bit `i` (0 = least significant) as 0/1.
    fn bit(self, i: u32) -> u8;

    /// Truncating conversion from `u64`.
    fn from_u64(v: u64) -> Self;
    fn to_u64(self) -> u64;

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    /// Reads `BYTES` little-endian bytes. Panics if `bytes` is too short.
    fn read_le(bytes: &[u8]) -> Self;

    /// Exclusive upper bound `2^(l-2)` of the value domain on which
    /// comparison by sign extraction is sound.
    fn domain_bound() -> u64 {
        1u64 << (Self::BITS - 2)
    }
}

macro_rules! impl_ring_word {
    ($($t:ty),*) => {$(
        impl RingWord for $t {
            const BITS: u32 = <$t>::BITS;
            const BYTES: usize = std::mem::size_of::<$t>();
            const ZERO: Self = 0;
            const ONE: Self = 1;

            #[inline]
            fn add(self, rhs: Self) -> Self { self.wrapping_add(rhs) }
            #[inline]
            fn sub(self, rhs: Self) -> Self { self.wrapping_sub(rhs) }
            #[inline]
            fn mul(self, rhs: Self) -> Self { self.wrapping_mul(rhs) }
            #[inline]
            fn neg(self) -> Self { self.wrapping_neg() }
            #[inline]
            fn bit(self, i: u32) -> u8 { ((self >> i) & 1) as u8 }
            #[inline]
            fn from_u64(v: u64) -> Self { v as $t }
            #[inline]
            fn to_u64(self) -> u64 { self as u64 }
            #[inline]
            fn random<R: Rng + ?Sized>(rng: &mut R) -> Self { rng.gen() }
            #[inline]
            fn write_le(self, out: &mut Vec<u8>) { out.extend_from_slice(&self.to_le_bytes()) }
            #[inline]
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    )*};
}

impl_ring_word!(u8, u16, u32, u64);

/// One of the two computing servers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Party {
    P1,
    P2,
}

impl Party {
    pub fn index(self) -> usize {
        match self {
            Party::P1 => 0,
            Party::P2 => 1,
        }
    }

    pub fn id(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Party::P1),
            2 => Ok(Party::P2),
            other => Err(Error::Protocol(format!("invalid party id {other}"))),
        }
    }

    pub fn peer(self) -> Self {
        match self {
            Party::P1 => Party::P2,
            Party::P2 => Party::P1,
        }
    }

    pub fn is_first(self) -> bool {
        self == Party::P1
    }
}

/// One party's additive share of a ring element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArithShare<W> {
    pub party: Party,
    pub value: W,
}

/// One party's XOR share of a bit. `bit` is always 0 or 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitShare {
    pub party: Party,
    pub bit: u8,
}

/// Splits `x` into two additive shares with a uniformly random first share.
pub fn share_arith<W: RingWord, R: Rng + ?Sized>(x: W, rng: &mut R) -> (ArithShare<W>, ArithShare<W>) {
    share_arith_with(x, W::random(rng))
}

/// Splits `x` using the given first share.
pub fn share_arith_with<W: RingWord>(x: W, first: W) -> (ArithShare<W>, ArithShare<W>) {
    (
        ArithShare { party: Party::P1, value: first },
        ArithShare { party: Party::P2, value: x.sub(first) },
    )
}

pub fn reconstruct_arith<W: RingWord>(a: ArithShare<W>, b: ArithShare<W>) -> Result<W> {
    if a.party == b.party {
        return Err(Error::PartyMismatch(format!(
            "both arithmetic shares claim party {}",
            a.party.id()
        )));
    }
    Ok(a.value.add(b.value))
}

pub fn share_bit<R: Rng + ?Sized>(b: u8, rng: &mut R) -> (BitShare, BitShare) {
    let first: u8 = rng.gen_range(0..=1);
    (
        BitShare { party: Party::P1, bit: first },
        BitShare { party: Party::P2, bit: (b & 1) ^ first },
    )
}

pub fn reconstruct_bit(a: BitShare, b: BitShare) -> Result<u8> {
    if a.party == b.party {
        return Err(Error::PartyMismatch(format!(
            "both bit shares claim party {}",
            a.party.id()
        )));
    }
    Ok(a.bit ^ b.bit)
}

/// A non-interactive linear operation on arithmetic shares.
#[derive(Clone, Copy, Debug)]
pub enum LinearOp<W> {
    Add(ArithShare<W>, ArithShare<W>),
    Sub(ArithShare<W>, ArithShare<W>),
    ConstMul(ArithShare<W>, W),
    ConstAdd(ArithShare<W>, W),
}

pub fn local_linear<W: RingWord>(op: LinearOp<W>) -> Result<ArithShare<W>> {
    match op {
        LinearOp::Add(x, y) | LinearOp::Sub(x, y) if x.party != y.party => Err(Error::PartyMismatch(
            "linear operands held by different parties".into(),
        )),
        LinearOp::Add(x, y) => Ok(ArithShare { party: x.party, value: x.value.add(y.value) }),
        LinearOp::Sub(x, y) => Ok(ArithShare { party: x.party, value: x.value.sub(y.value) }),
        LinearOp::ConstMul(x, c) => Ok(ArithShare { party: x.party, value: x.value.mul(c) }),
        LinearOp::ConstAdd(x, c) => Ok(ArithShare {
            party: x.party,
            value: add_public(x.party, x.value, c),
        }),
    }
}

/// Adds a public constant to a share: only `P1` actually adds it.
#[inline]
pub fn add_public<W: RingWord>(party: Party, share: W, c: W) -> W {
    if party.is_first() {
        share.add(c)
    } else {
        share
    }
}

/// Local NOT on a bit share: `P1` flips.
#[inline]
pub fn not_share(party: Party, bit: u8) -> u8 {
    if party.is_first() {
        bit ^ 1
    } else {
        bit
    }
}

/// Vector form of [`not_share`].
pub fn not_shares(party: Party, bits: &[u8]) -> Vec<u8> {
    bits.iter().map(|&b| not_share(party, b)).collect()
}

/// Local XOR of two bit-share vectors.
pub fn xor_shares(a: &[u8], b: &[u8]) -> Vec<u8> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x ^ y).collect()
}

/// The share a party holds of a public bit.
#[inline]
pub fn public_bit(party: Party, bit: u8) -> u8 {
    if party.is_first() {
        bit & 1
    } else {
        0
    }
}
