//! Transcript audit: classifies every frame exchanged between the servers
//! during a query and rejects anything that opens a value other than the
//! three permitted bit families.

use crate::error::{Error, Result};
use crate::transport::{FrameRecord, MsgType};

/// Per-family frame and payload counts from one server's transcript.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TranscriptSummary {
    pub frames: usize,
    /// Handshake and correlation-sync frames (public metadata only).
    pub control_frames: usize,
    /// Engine rounds: Beaver `(e, f)` and AND `(d, e)` masked differences,
    /// the latter bit-packed.
    pub engine_frames: usize,
    pub shuffle_frames: usize,
    pub delta_hat_bits: usize,
    pub phi1_masked_bits: usize,
    pub phi2_bits: usize,
    pub delta_hat_ones: usize,
    pub phi1_masked_ones: usize,
    pub phi2_ones: usize,
}

impl TranscriptSummary {
    /// Bits this server opened in each permitted family, counting only the
    /// frames it sent (each opening is sent by both sides).
    pub fn opened_bits(&self) -> usize {
        self.delta_hat_bits + self.phi1_masked_bits + self.phi2_bits
    }
}

/// Scans one server's transcript. Opened-bit totals come from the frames
/// this server sent; the count of ones is taken from the opened values, i.e.
/// each sent share XORed with the peer's frame of the same type and round.
/// Received frames are still checked for type and payload.
pub fn audit_transcript(records: &[FrameRecord]) -> Result<TranscriptSummary> {
    use crate::transport::Direction;
    use std::collections::HashMap;

    let mut s = TranscriptSummary::default();
    let mut pending: HashMap<(MsgType, u32, Direction), &[u8]> = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        let f = &rec.frame;
        s.frames += 1;
        let family = match f.msg_type {
            MsgType::Handshake | MsgType::CorrSync => {
                s.control_frames += 1;
                continue;
            }
            MsgType::EngineBeaver | MsgType::EngineAnd => {
                s.engine_frames += 1;
                continue;
            }
            MsgType::ShuffleZ2 | MsgType::ShuffleZ1 => {
                s.shuffle_frames += 1;
                continue;
            }
            MsgType::OpenDeltaHat => 0,
            MsgType::OpenPhi1Masked => 1,
            MsgType::OpenPhi2 => 2,
            other => {
                return Err(Error::Protocol(format!("frame {i}: {other:?} is not permitted between servers")));
            }
        };
        if let Some(b) = f.payload.iter().find(|&&b| b > 1) {
            return Err(Error::Protocol(format!("frame {i}: {:?} carries non-bit byte {b}", f.msg_type)));
        }
        let (count, ones) = match family {
            0 => (&mut s.delta_hat_bits, &mut s.delta_hat_ones),
            1 => (&mut s.phi1_masked_bits, &mut s.phi1_masked_ones),
            _ => (&mut s.phi2_bits, &mut s.phi2_ones),
        };
        if rec.direction == Direction::Sent {
            *count += f.payload.len();
        }
        let other = match rec.direction {
            Direction::Sent => Direction::Received,
            Direction::Received => Direction::Sent,
        };
        match pending.remove(&(f.msg_type, f.round, other)) {
            Some(peer) => {
                if peer.len() != f.payload.len() {
                    return Err(Error::Protocol(format!("frame {i}: opening halves differ in length")));
                }
                *ones += peer.iter().zip(&f.payload).filter(|(a, b)| *a != *b).count();
            }
            None => {
                pending.insert((f.msg_type, f.round, rec.direction), &f.payload);
            }
        }
    }
    Ok(s)
}
