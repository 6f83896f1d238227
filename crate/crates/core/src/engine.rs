//! Two-party lock-step protocol engine.
//!
//! A [`Session`] is one party's side of a computation. Both parties must
//! issue the same sequence of operations with the same batch lengths; every
//! message carries `(session id, round, op tag)` and any mismatch aborts the
//! session with [`Error::Desync`].
//!
//! Binary shares are vectors of bytes holding 0 or 1. Batched operations take
//! slices and cost one round per interactive layer regardless of batch size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dealer::{Consumption, PartyCorrelations};
use crate::error::{Error, Result};
use crate::ring::{add_public, not_shares, xor_shares, Party, RingWord};
use crate::transport::{Frame, MsgType, Transport};

/// Correlation consumption of each engine operation, in AND triples.
pub mod cost {
    /// Comparison circuit: `l - 1` generate bits, then two ANDs for each of
    /// the `l - 2` prefix combinations.
    pub const fn sec_ext_ands(l: u32) -> usize {
        let l = l as usize;
        (l - 1) + 2 * (l - 2)
    }

    /// Interactive layers of the comparison circuit.
    pub const fn sec_ext_rounds(l: u32) -> usize {
        1 + ceil_log2(l as usize - 1)
    }

    pub const fn ceil_log2(x: usize) -> usize {
        if x <= 1 {
            0
        } else {
            (usize::BITS - (x - 1).leading_zeros()) as usize
        }
    }

    /// One dominance check over `m` dimensions.
    pub const fn obli_dom_ands(l: u32, m: usize) -> usize {
        2 * m * sec_ext_ands(l) + 3 * m + 2 * m + 2 * (m - 1) + 1
    }

    /// Region membership of one row.
    pub const fn obli_gen_row_ands(l: u32, m: usize) -> usize {
        2 * m * sec_ext_ands(l) + m + (m - 1)
    }

    /// Dominance-flag accumulation and masking per fetch comparison.
    pub const FETCH_PAIR_ANDS: usize = 2;
}

/// Where the per-comparison masking bits in the fetch phase come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskSource {
    /// Each server samples its own share locally.
    #[default]
    Online,
    /// Shares are drawn from the dealer's shared random bits.
    Dealer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub rounds: u32,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
}

/// Packs 0/1 bytes into bytes, LSB-first.
fn pack_bits(bits: impl Iterator<Item = u8>, count: usize) -> Vec<u8> {
    let mut out = vec![0u8; count.div_ceil(8)];
    for (i, b) in bits.enumerate() {
        out[i / 8] |= b << (i % 8);
    }
    out
}

/// One party's protocol context.
pub struct Session<T, W> {
    party: Party,
    session_id: u64,
    transport: T,
    corr: PartyCorrelations<W>,
    round: u32,
    stats: SessionStats,
    rng: ChaCha12Rng,
    mask_source: MaskSource,
}

impl<T: Transport, W: RingWord> Session<T, W> {
    pub fn new(session_id: u64, transport: T, corr: PartyCorrelations<W>) -> Self {
        Session {
            party: corr.party(),
            session_id,
            transport,
            corr,
            round: 0,
            stats: SessionStats::default(),
            rng: ChaCha12Rng::from_entropy(),
            mask_source: MaskSource::Online,
        }
    }

    /// Seeds the session's local randomness (masking bits) for reproducible
    /// runs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha12Rng::seed_from_u64(seed);
        self
    }

    pub fn with_mask_source(mut self, source: MaskSource) -> Self {
        self.mask_source = source;
        self
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    pub fn consumed(&self) -> Consumption {
        self.corr.consumed()
    }

    pub fn correlations(&self) -> &PartyCorrelations<W> {
        &self.corr
    }

    pub fn correlations_mut(&mut self) -> &mut PartyCorrelations<W> {
        &mut self.corr
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn into_parts(self) -> (T, PartyCorrelations<W>) {
        (self.transport, self.corr)
    }

    fn send_frame(&mut self, ty: MsgType, payload: Vec<u8>) -> Result<()> {
        let frame = Frame::new(ty, self.session_id, self.round, payload);
        let len = frame.wire_len() as u64;
        self.transport.send(frame)?;
        self.stats.bytes_sent += len;
        self.stats.frames_sent += 1;
        Ok(())
    }

    fn recv_frame(&mut self, ty: MsgType) -> Result<Frame> {
        let frame = self.transport.recv()?;
        self.stats.bytes_received += frame.wire_len() as u64;
        self.stats.frames_received += 1;
        if frame.msg_type == MsgType::Error {
            return Err(Error::Remote(String::from_utf8_lossy(&frame.payload).into_owned()));
        }
        if frame.session_id != self.session_id || frame.round != self.round || frame.msg_type != ty {
            return Err(Error::Desync {
                round: self.round,
                detail: format!(
                    "expected {:?} in session {} round {}, got {:?} in session {} round {}",
                    ty, self.session_id, self.round, frame.msg_type, frame.session_id, frame.round
                ),
            });
        }
        Ok(frame)
    }

    /// Symmetric round: both parties send, then both receive.
    fn exchange(&mut self, ty: MsgType, payload: Vec<u8>) -> Result<Vec<u8>> {
        let sent = payload.len();
        self.send_frame(ty, payload)?;
        let frame = self.recv_frame(ty)?;
        if frame.payload.len() != sent {
            return Err(Error::Desync {
                round: self.round,
                detail: format!("batch of {sent} bytes against peer's {}", frame.payload.len()),
            });
        }
        self.round += 1;
        self.stats.rounds += 1;
        Ok(frame.payload)
    }

    /// One-directional step sent by this party.
    pub(crate) fn send_step(&mut self, ty: MsgType, payload: Vec<u8>) -> Result<()> {
        self.send_frame(ty, payload)?;
        self.round += 1;
        self.stats.rounds += 1;
        Ok(())
    }

    /// One-directional step received from the peer.
    pub(crate) fn recv_step(&mut self, ty: MsgType) -> Result<Vec<u8>> {
        let frame = self.recv_frame(ty)?;
        self.round += 1;
        self.stats.rounds += 1;
        Ok(frame.payload)
    }

    /// Tells the peer this session is being abandoned.
    pub fn abort(&mut self, reason: &str) {
        let _ = self.send_frame(MsgType::Error, reason.as_bytes().to_vec());
    }

    /// Opens the session: both parties exchange `payload` (query id and
    /// anything else they must agree on) and abort if it differs.
    pub fn handshake(&mut self, payload: &[u8]) -> Result<()> {
        let peer = self.exchange(MsgType::Handshake, payload.to_vec())?;
        if peer != payload {
            return Err(Error::Desync { round: self.round, detail: "handshake parameters differ between servers".into() });
        }
        Ok(())
    }

    /// Checks that both parties hold matching correlation sets at the same
    /// consumption point.
    pub fn corr_sync(&mut self) -> Result<()> {
        let (n, m) = self.corr.shape();
        let p = self.corr.provisioned();
        let c = self.corr.consumed();
        let fields = [
            n, m, p.beaver, p.and_triples, p.bits, p.shuffles, c.beaver, c.and_triples, c.bits, c.shuffles,
        ];
        let payload: Vec<u8> = fields.iter().flat_map(|&x| (x as u64).to_le_bytes()).collect();
        let peer = self.exchange(MsgType::CorrSync, payload.clone())?;
        if peer != payload {
            return Err(Error::Desync { round: self.round, detail: "correlation sets differ between servers".into() });
        }
        Ok(())
    }

    fn encode_words(words: impl IntoIterator<Item = W>, len_hint: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(len_hint * W::BYTES);
        for w in words {
            w.write_le(&mut out);
        }
        out
    }

    fn decode_words(bytes: &[u8]) -> Vec<W> {
        bytes.chunks_exact(W::BYTES).map(W::read_le).collect()
    }

    /// Opens a batch of arithmetic shares to both parties.
    pub fn open_arith(&mut self, shares: &[W]) -> Result<Vec<W>> {
        let peer = self.exchange(MsgType::OpenArith, Self::encode_words(shares.iter().copied(), shares.len()))?;
        Ok(shares.iter().zip(Self::decode_words(&peer)).map(|(a, b)| a.add(b)).collect())
    }

    /// Opens a batch of bit shares. `tag` names what is being opened and must
    /// be one of the open message types.
    pub fn open_bits(&mut self, tag: MsgType, shares: &[u8]) -> Result<Vec<u8>> {
        if !tag.is_open() || tag == MsgType::OpenArith {
            return Err(Error::Protocol(format!("{tag:?} is not a bit-open tag")));
        }
        let peer = self.exchange(tag, shares.to_vec())?;
        let mut out = Vec::with_capacity(shares.len());
        for (a, b) in shares.iter().zip(&peer) {
            if *b > 1 {
                return Err(Error::Protocol(format!("peer sent non-bit byte {b}")));
            }
            out.push(a ^ b);
        }
        Ok(out)
    }

    /// Beaver multiplication, elementwise over the batch.
    pub fn mul(&mut self, x: &[W], y: &[W]) -> Result<Vec<W>> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("mul of {} by {}", x.len(), y.len())));
        }
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let n = x.len();
        let triples = self.corr.take_beaver(n)?;
        let e = x.iter().zip(&triples).map(|(x, t)| x.sub(t.u));
        let f = y.iter().zip(&triples).map(|(y, t)| y.sub(t.v));
        let payload = Self::encode_words(e.chain(f), 2 * n);
        let peer = Self::decode_words(&self.exchange(MsgType::EngineBeaver, payload.clone())?);
        let mine = Self::decode_words(&payload);
        let party = self.party;
        Ok((0..n)
            .map(|i| {
                let e = mine[i].add(peer[i]);
                let f = mine[n + i].add(peer[n + i]);
                let t = triples[i];
                let local = t.w.add(e.mul(t.v)).add(f.mul(t.u));
                add_public(party, local, e.mul(f))
            })
            .collect())
    }

    /// Secure AND on bit shares, elementwise.
    pub fn and(&mut self, x: &[u8], y: &[u8]) -> Result<Vec<u8>> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("and of {} by {}", x.len(), y.len())));
        }
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let n = x.len();
        let (u, v, w) = self.corr.take_and(n)?;
        // masked bits d = x ^ u then e = y ^ v, packed LSB-first
        let masked = x.iter().zip(&u).chain(y.iter().zip(&v)).map(|(a, b)| a ^ b);
        let payload = pack_bits(masked, 2 * n);
        let peer = self.exchange(MsgType::EngineAnd, payload.clone())?;
        let first = self.party.is_first();
        let bit = |buf: &[u8], i: usize| (buf[i / 8] >> (i % 8)) & 1;
        Ok((0..n)
            .map(|i| {
                let d = bit(&payload, i) ^ bit(&peer, i);
                let e = bit(&payload, n + i) ^ bit(&peer, n + i);
                let mut z = w[i] ^ (d & v[i]) ^ (e & u[i]);
                if first {
                    z ^= d & e;
                }
                z
            })
            .collect())
    }

    /// `a | b = !(!a & !b)`.
    pub fn or(&mut self, x: &[u8], y: &[u8]) -> Result<Vec<u8>> {
        let nx = self.not(x);
        let ny = self.not(y);
        let z = self.and(&nx, &ny)?;
        Ok(self.not(&z))
    }

    pub fn xor(&self, x: &[u8], y: &[u8]) -> Vec<u8> {
        xor_shares(x, y)
    }

    pub fn not(&self, x: &[u8]) -> Vec<u8> {
        not_shares(self.party, x)
    }

    /// ANDs together each consecutive group of `width` bits, returning one
    /// bit per group. Uses a balanced tree: `ceil(log2 width)` rounds.
    pub fn and_reduce(&mut self, values: &[u8], width: usize) -> Result<Vec<u8>> {
        if width == 0 || !values.len().is_multiple_of(width) {
            return Err(Error::DimensionMismatch(format!("{} bits in groups of {width}", values.len())));
        }
        let groups = values.len() / width;
        let mut cur = values.to_vec();
        let mut w = width;
        while w > 1 {
            let pairs = w / 2;
            let odd = w % 2;
            let mut lhs = Vec::with_capacity(groups * pairs);
            let mut rhs = Vec::with_capacity(groups * pairs);
            for g in 0..groups {
                for k in 0..pairs {
                    lhs.push(cur[g * w + 2 * k]);
                    rhs.push(cur[g * w + 2 * k + 1]);
                }
            }
            let prod = self.and(&lhs, &rhs)?;
            let nw = pairs + odd;
            let mut next = Vec::with_capacity(groups * nw);
            for g in 0..groups {
                next.extend_from_slice(&prod[g * pairs..(g + 1) * pairs]);
                if odd == 1 {
                    next.push(cur[g * w + w - 1]);
                }
            }
            cur = next;
            w = nw;
        }
        Ok(cur)
    }

    /// Shared most significant bit of `a - b`, elementwise.
    ///
    /// Each party's share of `d = a - b` is a private `l`-bit number; the two
    /// are added with a parallel-prefix carry circuit over XOR-shared bits and
    /// only the top sum bit is kept. For `a, b` in `[0, 2^(l-2))` the result
    /// is 1 exactly when `a < b`.
    pub fn sec_ext(&mut self, a: &[W], b: &[W]) -> Result<Vec<u8>> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch(format!("sec_ext of {} by {}", a.len(), b.len())));
        }
        let n = a.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let top = W::BITS - 1;
        let leaves = top as usize;
        let mut xs = vec![0u8; n * leaves];
        let mut ys = vec![0u8; n * leaves];
        let mut msb = Vec::with_capacity(n);
        let first = self.party.is_first();
        for e in 0..n {
            let d = a[e].sub(b[e]);
            let own = if first { &mut xs } else { &mut ys };
            for i in 0..top {
                own[e * leaves + i as usize] = d.bit(i);
            }
            msb.push(d.bit(top));
        }
        // generate = x & y, propagate = x ^ y
        let mut g = self.and(&xs, &ys)?;
        let mut p = xor_shares(&xs, &ys);
        drop((xs, ys));

        let mut w = leaves;
        while w > 1 {
            let pairs = w / 2;
            let odd = w % 2;
            let mut lhs = Vec::with_capacity(n * pairs * 2);
            let mut rhs = Vec::with_capacity(n * pairs * 2);
            for e in 0..n {
                for k in 0..pairs {
                    let lo = e * w + 2 * k;
                    let hi = lo + 1;
                    lhs.push(p[hi]);
                    rhs.push(g[lo]);
                    lhs.push(p[hi]);
                    rhs.push(p[lo]);
                }
            }
            let prod = self.and(&lhs, &rhs)?;
            let nw = pairs + odd;
            let mut ng = Vec::with_capacity(n * nw);
            let mut np = Vec::with_capacity(n * nw);
            for e in 0..n {
                for k in 0..pairs {
                    let hi = e * w + 2 * k + 1;
                    let idx = (e * pairs + k) * 2;
                    // G = G_hi ^ (P_hi & G_lo); the two terms are never both 1
                    ng.push(g[hi] ^ prod[idx]);
                    np.push(prod[idx + 1]);
                }
                if odd == 1 {
                    ng.push(g[e * w + w - 1]);
                    np.push(p[e * w + w - 1]);
                }
            }
            g = ng;
            p = np;
            w = nw;
        }
        Ok(msb.iter().zip(&g).map(|(m, c)| m ^ c).collect())
    }

    /// Shared `a <= b`, computed as `NOT sec_ext(b, a)`.
    pub fn sec_leq(&mut self, a: &[W], b: &[W]) -> Result<Vec<u8>> {
        let lt = self.sec_ext(b, a)?;
        Ok(self.not(&lt))
    }

    /// Shares of uniformly random bits.
    pub fn random_bits(&mut self, count: usize) -> Result<Vec<u8>> {
        match self.mask_source {
            MaskSource::Online => Ok((0..count).map(|_| self.rng.gen_range(0..=1u8)).collect()),
            MaskSource::Dealer => self.corr.take_bits(count),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::cost;

    #[test]
    fn cost_constants() {
        assert_eq!(cost::sec_ext_ands(64), 187);
        assert_eq!(cost::sec_ext_ands(8), 19);
        assert_eq!(cost::sec_ext_rounds(64), 7);
        assert_eq!(cost::sec_ext_rounds(8), 4);
        assert_eq!(cost::ceil_log2(1), 0);
        assert_eq!(cost::ceil_log2(5), 3);
        assert_eq!(cost::ceil_log2(8), 3);
    }
}
