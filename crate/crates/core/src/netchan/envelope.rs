use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("envelope too short")]
    Truncated,
    #[error("bad envelope flag 0x{0:02x}")]
    BadFlag(u8),
    #[error("workload name is not UTF-8")]
    BadName,
    #[error("terminator envelope carries a body")]
    TerminatorWithBody,
    #[error("workload name longer than 255 bytes")]
    NameTooLong,
}

/// The unit carried by DATA frames: a workload instance, or the universal
/// terminator (UT) that shuts the network down.
///
/// Encoded as `u8 flag (1 = UT) ‖ u8 name length ‖ name ‖ body`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    terminator: bool,
    workload: String,
    body: Vec<u8>,
}

impl Envelope {
    pub fn data(workload: impl Into<String>, body: Vec<u8>) -> Self {
        Self { terminator: false, workload: workload.into(), body }
    }

    pub fn terminator(workload: impl Into<String>) -> Self {
        Self { terminator: true, workload: workload.into(), body: Vec::new() }
    }

    pub fn is_terminator(&self) -> bool {
        self.terminator
    }

    pub fn workload(&self) -> &str {
        &self.workload
    }

    pub fn body(&self) -> &[u8] {
        &self.body
    }

    pub fn into_body(self) -> Vec<u8> {
        self.body
    }

    pub fn encode(&self) -> Result<Vec<u8>, EnvelopeError> {
        let name = self.workload.as_bytes();
        let name_len = u8::try_from(name.len()).map_err(|_| EnvelopeError::NameTooLong)?;
        let mut out = Vec::with_capacity(2 + name.len() + self.body.len());
        out.push(u8::from(self.terminator));
        out.push(name_len);
        out.extend_from_slice(name);
        out.extend_from_slice(&self.body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let [flag, name_len, rest @ ..] = bytes else {
            return Err(EnvelopeError::Truncated);
        };
        let terminator = match flag {
            0 => false,
            1 => true,
            other => return Err(EnvelopeError::BadFlag(*other)),
        };
        let n = *name_len as usize;
        if rest.len() < n {
            return Err(EnvelopeError::Truncated);
        }
        let workload = std::str::from_utf8(&rest[..n]).map_err(|_| EnvelopeError::BadName)?.to_string();
        let body = rest[n..].to_vec();
        if terminator && !body.is_empty() {
            return Err(EnvelopeError::TerminatorWithBody);
        }
        Ok(Self { terminator, workload, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn terminator_has_no_body() {
        let ut = Envelope::terminator("mandelbrot");
        assert!(ut.is_terminator());
        assert!(ut.body().is_empty());
        assert_eq!(Envelope::decode(&ut.encode().unwrap()).unwrap(), ut);
        assert_eq!(Envelope::decode(&[1, 0, 9]), Err(EnvelopeError::TerminatorWithBody));
    }

    #[test]
    fn malformed() {
        assert_eq!(Envelope::decode(&[0]), Err(EnvelopeError::Truncated));
        assert_eq!(Envelope::decode(&[0, 5, b'a']), Err(EnvelopeError::Truncated));
        assert_eq!(Envelope::decode(&[7, 0]), Err(EnvelopeError::BadFlag(7)));
    }

    proptest! {
        #[test]
        fn round_trip(name in "[a-z]{0,20}", body in proptest::collection::vec(any::<u8>(), 0..100)) {
            let e = Envelope::data(name, body);
            prop_assert_eq!(Envelope::decode(&e.encode().unwrap()).unwrap(), e);
        }
    }
}
