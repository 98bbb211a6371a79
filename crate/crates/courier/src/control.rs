//! Control records for the shutdown and quiescence protocol.
//!
//! Control records ride the normal wire format with `dst_rank` set to the
//! [`crate::wire::CONTROL_DST`] sentinel; the payload starts with an opcode
//! byte followed by little-endian fields. Ranks report their drained state to
//! the local agent with `LocalDone`; the coordinator agent (node 0) runs
//! counting rounds with `Probe`/`Ack` until two consecutive rounds agree and
//! the global sent and consumed counters balance, then an `Ack` toward each
//! local rank confirms quiescence.

use crate::wire::ctl;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMsg {
    /// Rank -> local agent: counters at a drained, reaction-quiet point.
    LocalDone { sent: u64, consumed: u64 },
    /// Coordinator -> agents: ask for a round vector; `final_round` announces
    /// that quiescence was detected and the agent may confirm and exit.
    Probe { round: u32, final_round: bool },
    /// Agent -> coordinator: round vector reply. Agent -> rank: quiescence
    /// confirmation (fields carry the round and global totals).
    Ack { round: u32, done: bool, sent: u64, consumed: u64 },
}

impl ControlMsg {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            ControlMsg::LocalDone { sent, consumed } => {
                let mut v = Vec::with_capacity(17);
                v.push(ctl::LOCAL_DONE);
                v.extend_from_slice(&sent.to_le_bytes());
                v.extend_from_slice(&consumed.to_le_bytes());
                v
            }
            ControlMsg::Probe { round, final_round } => {
                let mut v = Vec::with_capacity(6);
                v.push(ctl::QUIESCENCE_PROBE);
                v.extend_from_slice(&round.to_le_bytes());
                v.push(*final_round as u8);
                v
            }
            ControlMsg::Ack { round, done, sent, consumed } => {
                let mut v = Vec::with_capacity(22);
                v.push(ctl::QUIESCENCE_ACK);
                v.extend_from_slice(&round.to_le_bytes());
                v.push(*done as u8);
                v.extend_from_slice(&sent.to_le_bytes());
                v.extend_from_slice(&consumed.to_le_bytes());
                v
            }
        }
    }

    /// Decode a control payload; `None` marks an unknown or truncated record.
    pub fn decode(payload: &[u8]) -> Option<ControlMsg> {
        let op = *payload.first()?;
        match op {
            ctl::LOCAL_DONE if payload.len() >= 17 => Some(ControlMsg::LocalDone {
                sent: u64::from_le_bytes(payload[1..9].try_into().unwrap()),
                consumed: u64::from_le_bytes(payload[9..17].try_into().unwrap()),
            }),
            ctl::QUIESCENCE_PROBE if payload.len() >= 6 => Some(ControlMsg::Probe {
                round: u32::from_le_bytes(payload[1..5].try_into().unwrap()),
                final_round: payload[5] != 0,
            }),
            ctl::QUIESCENCE_ACK if payload.len() >= 22 => Some(ControlMsg::Ack {
                round: u32::from_le_bytes(payload[1..5].try_into().unwrap()),
                done: payload[5] != 0,
                sent: u64::from_le_bytes(payload[6..14].try_into().unwrap()),
                consumed: u64::from_le_bytes(payload[14..22].try_into().unwrap()),
            }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_codec_roundtrip() {
        for msg in [
            ControlMsg::LocalDone { sent: 12345, consumed: 678 },
            ControlMsg::Probe { round: 7, final_round: false },
            ControlMsg::Probe { round: 8, final_round: true },
            ControlMsg::Ack { round: 7, done: true, sent: u64::MAX, consumed: 0 },
        ] {
            assert_eq!(ControlMsg::decode(&msg.encode()), Some(msg));
        }
    }

    #[test]
    fn unknown_opcode_decodes_to_none() {
        assert_eq!(ControlMsg::decode(&[0x7F, 0, 0]), None);
        assert_eq!(ControlMsg::decode(&[]), None);
        assert_eq!(ControlMsg::decode(&[ctl::LOCAL_DONE, 1, 2]), None);
    }
}
