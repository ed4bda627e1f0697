//! The only thing that crosses a silo boundary.
//!
//! ```text
//! u64 round | u32 sender (u32::MAX = central) | u32 kind | parameter file
//! ```
//! All integers little-endian.

use super::{SiloError, SiloId};
use crate::nn::{deserialize_tagged, serialize_params, serialize_tagged, ModelParams};

pub const HEADER_LEN: usize = 16;
const CENTRAL_SENDER: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sender {
    Central,
    Silo(SiloId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    /// θ_t broadcast by the central analyzer.
    GlobalModel,
    /// θ_{s,t} returned by a silo.
    LocalUpdate,
    /// Step-1 generator shipped to silos.
    Generator,
    /// Step-1 label classifier shipped to silos.
    Classifier,
}

impl MessageKind {
    fn tag(self) -> u32 {
        match self {
            MessageKind::GlobalModel => 0,
            MessageKind::LocalUpdate => 1,
            MessageKind::Generator => 2,
            MessageKind::Classifier => 3,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            0 => MessageKind::GlobalModel,
            1 => MessageKind::LocalUpdate,
            2 => MessageKind::Generator,
            3 => MessageKind::Classifier,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamMessage {
    pub round: u64,
    pub sender: Sender,
    pub kind: MessageKind,
    payload: Vec<u8>,
}

impl ParamMessage {
    pub fn new(round: u64, sender: Sender, kind: MessageKind, params: &ModelParams) -> Self {
        ParamMessage {
            round,
            sender,
            kind,
            payload: serialize_params(params),
        }
    }

    pub fn with_role(round: u64, sender: Sender, kind: MessageKind, params: &ModelParams, role: &str) -> Self {
        ParamMessage {
            round,
            sender,
            kind,
            payload: serialize_tagged(params, role),
        }
    }

    /// Wraps arbitrary bytes. Exists for audit fixtures; a payload built this
    /// way is not guaranteed to parse.
    pub fn from_raw_parts(round: u64, sender: Sender, kind: MessageKind, payload: Vec<u8>) -> Self {
        ParamMessage {
            round,
            sender,
            kind,
            payload,
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn params(&self) -> Result<ModelParams, SiloError> {
        self.params_with_role().map(|(p, _)| p)
    }

    pub fn params_with_role(&self) -> Result<(ModelParams, String), SiloError> {
        deserialize_tagged(&self.payload).map_err(|e| SiloError::Message(e.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.round.to_le_bytes());
        let sender = match self.sender {
            Sender::Central => CENTRAL_SENDER,
            Sender::Silo(id) => id.0,
        };
        out.extend_from_slice(&sender.to_le_bytes());
        out.extend_from_slice(&self.kind.tag().to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses the header and checks that the payload is a parameter file.
    pub fn decode(bytes: &[u8]) -> Result<Self, SiloError> {
        if bytes.len() < HEADER_LEN {
            return Err(SiloError::Message(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let round = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
        let sender = match u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) {
            CENTRAL_SENDER => Sender::Central,
            id => Sender::Silo(SiloId(id)),
        };
        let tag = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
        let kind = MessageKind::from_tag(tag).ok_or_else(|| SiloError::Message(format!("unknown kind tag {tag}")))?;
        let msg = ParamMessage::from_raw_parts(round, sender, kind, bytes[HEADER_LEN..].to_vec());
        msg.params()?;
        Ok(msg)
    }
}
