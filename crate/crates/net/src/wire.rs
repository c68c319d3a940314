//! Frame layout: kind (1 byte), correlation id (8 bytes, top bit marks a
//! response), then the body with a u32 length prefix.

use guard_core::codec::{DecodeError, Reader, Writer};

const RESPONSE_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub correlation: u64,
    pub is_response: bool,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let corr = self.correlation | if self.is_response { RESPONSE_BIT } else { 0 };
        let mut w = Writer::new();
        w.u8(self.kind).u64(corr).bytes(&self.body);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let kind = r.u8()?;
        let corr = r.u64()?;
        let body = r.bytes()?.to_vec();
        r.finish()?;
        Ok(Frame { kind, correlation: corr & !RESPONSE_BIT, is_response: corr & RESPONSE_BIT != 0, body })
    }
}
