//! Wire format for messages exchanged between a controller channel and its
//! interface unit.
//!
//! ```text
//!  0      1        2        3         4 .. 4+2n          4+2n .. 6+2n
//! +------+--------+--------+---------+------------------+-------------+
//! | 0xA5 | address| opcode | n words | payload (BE u16) | sum16 (BE)  |
//! +------+--------+--------+---------+------------------+-------------+
//! ```
//!
//! The trailing checksum is the byte sum of everything before it, modulo
//! 2^16. Replies set bit 7 of the opcode; a request that failed its checksum
//! comes back verbatim, so its opcode still has bit 7 clear.

use std::fmt;

use arrayvec::ArrayVec;
use thiserror::Error;

/// Start-of-frame marker.
pub const SOF: u8 = 0xA5;
/// Bytes before the payload: SOF, address, opcode, length.
pub const HEADER_LEN: usize = 4;
pub const CHECKSUM_LEN: usize = 2;
pub const MAX_PAYLOAD_WORDS: usize = 5;
/// Longest frame on the wire (a data reply).
pub const MAX_FRAME_LEN: usize = HEADER_LEN + 2 * MAX_PAYLOAD_WORDS + CHECKSUM_LEN;
/// Number of interface units a controller can address.
pub const MAX_DEVICES: u8 = 6;

const RESPONSE_BIT: u8 = 0x80;

/// Encoded frame bytes. Every frame fits inline; nothing on the hot path
/// allocates.
pub type WireBytes = ArrayVec<u8, MAX_FRAME_LEN>;

/// Payload words of one message.
pub type Payload = ArrayVec<u16, MAX_PAYLOAD_WORDS>;

/// 16-bit additive checksum: the sum of all bytes modulo 65536.
pub fn compute_checksum(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0u16, |acc, &b| acc.wrapping_add(u16::from(b)))
}

/// The operation a message asks for (or answers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Command {
    WriteSetpoint = 0x01,
    WriteCommand = 0x02,
    ReadData = 0x03,
    ReadLastSetpoint = 0x04,
    ReadLastCommand = 0x05,
    Recalibrate = 0x06,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::WriteSetpoint,
        Command::WriteCommand,
        Command::ReadData,
        Command::ReadLastSetpoint,
        Command::ReadLastCommand,
        Command::Recalibrate,
    ];

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| *c as u8 == code)
    }

    /// Fixed payload length of a request carrying this command.
    pub const fn request_words(self) -> usize {
        match self {
            Command::WriteSetpoint | Command::WriteCommand => 1,
            Command::ReadData | Command::ReadLastSetpoint | Command::ReadLastCommand | Command::Recalibrate => 0,
        }
    }

    /// Fixed payload length of the reply to this command. Write replies echo
    /// the value that was written.
    pub const fn response_words(self) -> usize {
        match self {
            Command::ReadData => 5,
            Command::WriteSetpoint | Command::WriteCommand | Command::ReadLastSetpoint | Command::ReadLastCommand => 1,
            Command::Recalibrate => 0,
        }
    }
}

/// Command plus direction. Encodes to a single byte; replies carry the high
/// bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Opcode {
    pub command: Command,
    pub response: bool,
}

impl Opcode {
    pub const fn request(command: Command) -> Self {
        Self {
            command,
            response: false,
        }
    }

    pub const fn response(command: Command) -> Self {
        Self {
            command,
            response: true,
        }
    }

    pub const fn to_byte(self) -> u8 {
        let code = self.command as u8;
        if self.response {
            code | RESPONSE_BIT
        } else {
            code
        }
    }

    pub fn from_byte(byte: u8) -> Option<Self> {
        let command = Command::from_code(byte & !RESPONSE_BIT)?;
        Some(Self {
            command,
            response: byte & RESPONSE_BIT != 0,
        })
    }

    pub const fn payload_words(self) -> usize {
        if self.response {
            self.command.response_words()
        } else {
            self.command.request_words()
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}{}", self.command, if self.response { "+resp" } else { "" })
    }
}

/// One decoded wire message. The checksum is not stored; it is derived from
/// the other fields on encode and verified on decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub address: u8,
    pub opcode: Opcode,
    pub payload: Payload,
}

impl Message {
    /// Builds a message, checking the address range and payload length.
    pub fn new(address: u8, opcode: Opcode, words: &[u16]) -> Result<Self, EncodeError> {
        if address >= MAX_DEVICES {
            return Err(EncodeError::AddressOutOfRange(address));
        }
        if words.len() != opcode.payload_words() {
            return Err(EncodeError::PayloadLength {
                opcode,
                expected: opcode.payload_words(),
                actual: words.len(),
            });
        }
        let payload = words.iter().copied().collect();
        Ok(Self {
            address,
            opcode,
            payload,
        })
    }

    pub fn request(address: u8, command: Command, words: &[u16]) -> Result<Self, EncodeError> {
        Self::new(address, Opcode::request(command), words)
    }

    pub fn response(address: u8, command: Command, words: &[u16]) -> Result<Self, EncodeError> {
        Self::new(address, Opcode::response(command), words)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 2 * self.payload.len() + CHECKSUM_LEN
    }

    /// Checksum this message carries on the wire.
    pub fn checksum(&self) -> u16 {
        let bytes = self.encode_unchecked();
        compute_checksum(&bytes[..bytes.len() - CHECKSUM_LEN])
    }

    fn encode_unchecked(&self) -> WireBytes {
        let mut out = WireBytes::new();
        out.push(SOF);
        out.push(self.address);
        out.push(self.opcode.to_byte());
        out.push(self.payload.len() as u8);
        for word in &self.payload {
            out.extend(word.to_be_bytes());
        }
        let sum = compute_checksum(&out);
        out.extend(sum.to_be_bytes());
        out
    }
}

/// Reasons a message cannot be put on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("address {0} out of range (max {max})", max = MAX_DEVICES - 1)]
    AddressOutOfRange(u8),
    #[error("{opcode} carries {expected} payload words, got {actual}")]
    PayloadLength {
        opcode: Opcode,
        expected: usize,
        actual: usize,
    },
}

/// Serializes a message. Rejects messages whose fields violate the wire
/// invariants (fields are public, so a `Message` can be built by hand).
pub fn encode(msg: &Message) -> Result<WireBytes, EncodeError> {
    if msg.address >= MAX_DEVICES {
        return Err(EncodeError::AddressOutOfRange(msg.address));
    }
    if msg.payload.len() != msg.opcode.payload_words() {
        return Err(EncodeError::PayloadLength {
            opcode: msg.opcode,
            expected: msg.opcode.payload_words(),
            actual: msg.payload.len(),
        });
    }
    Ok(msg.encode_unchecked())
}

/// Classification of a byte sequence that is not a valid message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecodeErrorKind {
    BadSof,
    BadLength,
    BadChecksum,
    UnknownOpcode,
    AddressOutOfRange,
}

impl DecodeErrorKind {
    /// Frame-level damage: the receiver cannot trust any field. The
    /// interface unit returns such frames to the sender.
    pub const fn is_corruption(self) -> bool {
        matches!(
            self,
            DecodeErrorKind::BadSof | DecodeErrorKind::BadLength | DecodeErrorKind::BadChecksum
        )
    }
}

/// A failed decode, carrying the offending bytes so they can be echoed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?} in {len}-byte frame", len = raw.len())]
pub struct DecodeError {
    pub kind: DecodeErrorKind,
    pub raw: Vec<u8>,
}

impl DecodeError {
    fn new(kind: DecodeErrorKind, raw: &[u8]) -> Self {
        Self {
            kind,
            raw: raw.to_vec(),
        }
    }
}

/// Parses one complete frame.
///
/// Checks run in wire order: framing (SOF, declared length against actual
/// length), then the checksum, then field semantics. Since the checksum
/// covers the address and opcode, any single flipped bit outside the SOF
/// and length bytes surfaces as `BadChecksum`.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    use DecodeErrorKind::*;

    if bytes.is_empty() {
        return Err(DecodeError::new(BadLength, bytes));
    }
    if bytes[0] != SOF {
        return Err(DecodeError::new(BadSof, bytes));
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(DecodeError::new(BadLength, bytes));
    }
    let words = usize::from(bytes[3]);
    if words > MAX_PAYLOAD_WORDS || bytes.len() != HEADER_LEN + 2 * words + CHECKSUM_LEN {
        return Err(DecodeError::new(BadLength, bytes));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let carried = u16::from_be_bytes([trailer[0], trailer[1]]);
    if compute_checksum(body) != carried {
        return Err(DecodeError::new(BadChecksum, bytes));
    }
    let opcode = Opcode::from_byte(bytes[2]).ok_or_else(|| DecodeError::new(UnknownOpcode, bytes))?;
    let address = bytes[1];
    if address >= MAX_DEVICES {
        return Err(DecodeError::new(AddressOutOfRange, bytes));
    }
    if words != opcode.payload_words() {
        return Err(DecodeError::new(BadLength, bytes));
    }
    let payload = body[HEADER_LEN..]
        .chunks_exact(2)
        .map(|pair| u16::from_be_bytes([pair[0], pair[1]]))
        .collect();
    Ok(Message {
        address,
        opcode,
        payload,
    })
}
