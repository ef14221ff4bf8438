//! Signed message envelopes and their stream framing.
//!
//! On the wire every message is `[len: u32 BE][UTF-8 JSON envelope]`. The
//! signature covers `kind ␟ timestamp ␟ canonical_json(payload)`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::chain::{Block, FIELD_SEPARATOR};

/// Largest accepted frame body.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("non-integer number in canonical JSON")]
    NonIntegerNumber,
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte cap")]
    FrameTooLarge(usize),
    #[error("stream ended inside a frame")]
    Truncated,
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("envelope signature does not verify")]
    BadSignature,
    #[error("payload does not match {kind:?}: {detail}")]
    BadPayload { kind: MessageKind, detail: String },
    #[error("invalid key material: {0}")]
    Key(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Hello,
    Peers,
    NewBlock,
    GetBlocks,
    Blocks,
    Tx,
    Query,
    Response,
    Ping,
    Pong,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Hello => "HELLO",
            MessageKind::Peers => "PEERS",
            MessageKind::NewBlock => "NEW_BLOCK",
            MessageKind::GetBlocks => "GET_BLOCKS",
            MessageKind::Blocks => "BLOCKS",
            MessageKind::Tx => "TX",
            MessageKind::Query => "QUERY",
            MessageKind::Response => "RESPONSE",
            MessageKind::Ping => "PING",
            MessageKind::Pong => "PONG",
        }
    }
}

/// Ed25519 keypair of a node (or client). The node id is the lowercase hex
/// public key.
pub struct NodeIdentity {
    signing_key: SigningKey,
    node_id: String,
}

impl NodeIdentity {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let signing_key = SigningKey::from_bytes(&seed);
        let node_id = hex::encode(signing_key.verifying_key().as_bytes());
        Self { signing_key, node_id }
    }

    pub fn generate() -> Self {
        let signing_key = SigningKey::generate(&mut rand::rngs::OsRng);
        Self::from_seed(signing_key.to_bytes())
    }

    /// Reads a hex seed from `path`, or generates one and writes it there.
    pub fn load_or_create(path: &Path) -> Result<Self, WireError> {
        match fs::read_to_string(path) {
            Ok(text) => {
                let bytes = hex::decode(text.trim()).map_err(|e| WireError::Key(e.to_string()))?;
                let seed: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| WireError::Key("key file must hold 32 bytes".into()))?;
                Ok(Self::from_seed(seed))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let identity = Self::generate();
                if let Some(parent) = path.parent() {
                    if !parent.as_os_str().is_empty() {
                        fs::create_dir_all(parent)?;
                    }
                }
                fs::write(path, hex::encode(identity.signing_key.to_bytes()))?;
                Ok(identity)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn sign(&self, message: &[u8]) -> [u8; 64] {
        self.signing_key.sign(message).to_bytes()
    }
}

impl std::fmt::Debug for NodeIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeIdentity").field("node_id", &self.node_id).finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: String,
    pub kind: MessageKind,
    /// Unix milliseconds. Informational only.
    pub timestamp: u64,
    pub payload: Value,
    pub signature: String,
}

impl Envelope {
    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T, WireError> {
        serde_json::from_value(self.payload.clone()).map_err(|e| WireError::BadPayload {
            kind: self.kind,
            detail: e.to_string(),
        })
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloPayload {
    pub listen_addr: String,
    pub node_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeersPayload {
    pub addrs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewBlockPayload {
    pub block: Block,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetBlocksPayload {
    #[serde(default)]
    pub from_index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlocksPayload {
    pub blocks: Vec<Block>,
}

/// Serializes `value` with sorted object keys and no whitespace. Only
/// integral numbers are allowed.
pub fn canonical_json(value: &Value) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    write_canonical(value, &mut out)?;
    Ok(out)
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) -> Result<(), WireError> {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(b) => out.extend_from_slice(if *b { b"true" } else { b"false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.extend_from_slice(i.to_string().as_bytes());
            } else if let Some(u) = n.as_u64() {
                out.extend_from_slice(u.to_string().as_bytes());
            } else {
                return Err(WireError::NonIntegerNumber);
            }
        }
        Value::String(s) => {
            serde_json::to_writer(&mut *out, s).expect("string serializes");
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out)?;
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (key, item)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, key).expect("string serializes");
                out.push(b':');
                write_canonical(item, out)?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

/// Canonical JSON as a `String`.
pub fn canonical_json_string(value: &Value) -> Result<String, WireError> {
    Ok(String::from_utf8(canonical_json(value)?).expect("canonical JSON is UTF-8"))
}

pub fn signing_bytes(kind: MessageKind, timestamp: u64, payload: &Value) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    out.extend_from_slice(kind.as_str().as_bytes());
    out.push(FIELD_SEPARATOR);
    out.extend_from_slice(timestamp.to_string().as_bytes());
    out.push(FIELD_SEPARATOR);
    out.extend_from_slice(&canonical_json(payload)?);
    Ok(out)
}

pub fn sign_envelope(
    kind: MessageKind,
    timestamp: u64,
    payload: Value,
    identity: &NodeIdentity,
) -> Result<Envelope, WireError> {
    let bytes = signing_bytes(kind, timestamp, &payload)?;
    let signature = hex::encode(identity.sign(&bytes));
    Ok(Envelope {
        sender: identity.node_id().to_owned(),
        kind,
        timestamp,
        payload,
        signature,
    })
}

/// Serializes `payload` and signs it. Panics only if `payload` contains a
/// float, which none of the protocol payloads do.
pub fn sign_payload<T: Serialize>(
    kind: MessageKind,
    timestamp: u64,
    payload: &T,
    identity: &NodeIdentity,
) -> Envelope {
    let value = serde_json::to_value(payload).expect("payload serializes");
    sign_envelope(kind, timestamp, value, identity).expect("protocol payloads are integral")
}

/// True iff `signature` is valid for `sender`'s key. Malformed fields just
/// fail verification.
pub fn verify_envelope(env: &Envelope) -> bool {
    let Ok(key_bytes) = hex::decode(&env.sender) else { return false };
    let Ok(key_bytes) = <[u8; 32]>::try_from(key_bytes.as_slice()) else { return false };
    let Ok(key) = VerifyingKey::from_bytes(&key_bytes) else { return false };
    let Ok(sig_bytes) = hex::decode(&env.signature) else { return false };
    let Ok(sig_bytes) = <[u8; 64]>::try_from(sig_bytes.as_slice()) else { return false };
    let Ok(message) = signing_bytes(env.kind, env.timestamp, &env.payload) else { return false };
    key.verify(&message, &Signature::from_bytes(&sig_bytes)).is_ok()
}

/// Parses one message body and checks its signature. Handlers only ever see
/// envelopes that came through here.
pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, WireError> {
    let env: Envelope =
        serde_json::from_slice(bytes).map_err(|e| WireError::Malformed(e.to_string()))?;
    if !verify_envelope(&env) {
        return Err(WireError::BadSignature);
    }
    Ok(env)
}

pub fn frame(body: &[u8]) -> Result<Vec<u8>, WireError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> Result<(), WireError> {
    let framed = frame(body)?;
    w.write_all(&framed)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the stream ended cleanly on a frame
/// boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < header.len() {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn fixed_identity() -> NodeIdentity {
        let seed: [u8; 32] = std::array::from_fn(|i| i as u8);
        NodeIdentity::from_seed(seed)
    }

    #[test]
    fn canonical_examples() {
        assert_eq!(canonical_json(&json!({"b":1,"a":2})).unwrap(), br#"{"a":2,"b":1}"#);
        assert_eq!(canonical_json(&json!([])).unwrap(), b"[]");
        assert_eq!(
            canonical_json(&json!({"x":{"b":[1,2],"a":0}})).unwrap(),
            br#"{"x":{"a":0,"b":[1,2]}}"#
        );
        assert_eq!(
            canonical_json(&json!({"s":"a\"b\n\u{1}é", "n": -5, "u": u64::MAX})).unwrap(),
            "{\"n\":-5,\"s\":\"a\\\"b\\n\\u0001é\",\"u\":18446744073709551615}".as_bytes()
        );
        assert!(matches!(canonical_json(&json!({"f": 1.5})), Err(WireError::NonIntegerNumber)));
    }

    #[test]
    fn signing_bytes_examples() {
        let ping = signing_bytes(MessageKind::Ping, 0, &json!({})).unwrap();
        assert_eq!(ping, b"PING\x1f0\x1f{}");
        let a = signing_bytes(MessageKind::Tx, 5, &json!({"a":1,"b":2})).unwrap();
        let b = signing_bytes(MessageKind::Tx, 5, &json!({"b":2,"a":1})).unwrap();
        assert_eq!(a, b);
        let c = signing_bytes(MessageKind::Query, 5, &json!({"a":1,"b":2})).unwrap();
        assert_ne!(a, c);
    }

    // Public key and signatures produced by Python's `cryptography` Ed25519
    // implementation from the same 32-byte seed (0, 1, ..., 31).
    #[test]
    fn signatures_match_independent_ed25519() {
        let id = fixed_identity();
        assert_eq!(id.node_id(), "03a107bff3ce10be1d70dd18e74bc09967e4d6309ba50d5f1ddc8664125531b8");
        let env = sign_envelope(MessageKind::Ping, 0, json!({}), &id).unwrap();
        assert_eq!(
            env.signature,
            "1f53df6e0c2b6528afd14d97a67dadae51a3479762c6cbf7ecaa946e1c916a5c\
             3acadfd88dfe74098a0c67dba3f7e822b5a37687b3f75369b14417d8cf2c410a"
        );
        let env = sign_envelope(MessageKind::NewBlock, 1_700_000_000_000, json!({"block":{"a":1}}), &id)
            .unwrap();
        assert_eq!(
            env.signature,
            "9c7bae6f456adbfcbb6c254328b585c9b88670359c39f49b6eecc39123cd33a6\
             49dbbb5df3f51e1c737badf1a98dcc6df886f26ffed336e7d4c81d7b9096310a"
        );
    }

    #[test]
    fn sign_verify_and_tamper() {
        let id = fixed_identity();
        let env = sign_envelope(MessageKind::Tx, 42, json!({"tx":{"kind":"raw","data":"hi"}}), &id).unwrap();
        assert!(verify_envelope(&env));
        assert_eq!(sign_envelope(env.kind, 42, env.payload.clone(), &id).unwrap(), env);

        let mut flipped = env.clone();
        flipped.payload = json!({"tx":{"kind":"raw","data":"hj"}});
        assert!(!verify_envelope(&flipped));

        let mut swapped = env.clone();
        swapped.sender = NodeIdentity::generate().node_id().to_owned();
        assert!(!verify_envelope(&swapped));

        let mut garbage = env.clone();
        garbage.sender = "not hex".into();
        assert!(!verify_envelope(&garbage));
        garbage = env.clone();
        garbage.signature = "abcd".into();
        assert!(!verify_envelope(&garbage));
    }

    #[test]
    fn decode_rejects_bad_signature() {
        let id = fixed_identity();
        let mut env = sign_payload(MessageKind::GetBlocks, 1, &GetBlocksPayload { from_index: 0 }, &id);
        assert_eq!(decode_envelope(&env.to_json_bytes()).unwrap(), env);
        env.timestamp = 2;
        assert!(matches!(decode_envelope(&env.to_json_bytes()), Err(WireError::BadSignature)));
        assert!(matches!(decode_envelope(b"{nope"), Err(WireError::Malformed(_))));
    }

    #[test]
    fn kind_serializes_screaming() {
        assert_eq!(serde_json::to_string(&MessageKind::NewBlock).unwrap(), "\"NEW_BLOCK\"");
        for kind in [MessageKind::Hello, MessageKind::GetBlocks, MessageKind::Pong] {
            assert_eq!(serde_json::to_value(kind).unwrap(), json!(kind.as_str()));
        }
    }

    #[test]
    fn framing_examples() {
        assert_eq!(frame(b"hello").unwrap(), b"\x00\x00\x00\x05hello");
        let mut huge = io::Cursor::new((1u32 << 30).to_be_bytes().to_vec());
        assert!(matches!(read_frame(&mut huge), Err(WireError::FrameTooLarge(_))));
        let mut truncated = io::Cursor::new(b"\x00\x00\x00\x05hel".to_vec());
        assert!(matches!(read_frame(&mut truncated), Err(WireError::Truncated)));
        let mut half_header = io::Cursor::new(b"\x00\x00".to_vec());
        assert!(matches!(read_frame(&mut half_header), Err(WireError::Truncated)));
        let mut empty = io::Cursor::new(Vec::new());
        assert!(read_frame(&mut empty).unwrap().is_none());
    }

    #[test]
    fn key_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys/node.key");
        let a = NodeIdentity::load_or_create(&path).unwrap();
        let b = NodeIdentity::load_or_create(&path).unwrap();
        assert_eq!(a.node_id(), b.node_id());
        assert_eq!(a.node_id().len(), 64);
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(|i| json!(i)),
            "[ -~é\u{1f}]{0,8}".prop_map(Value::String),
        ];
        leaf.prop_recursive(4, 32, 6, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Value::Array),
                proptest::collection::btree_map("[a-z]{0,4}", inner, 0..6)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn canonical_is_fixed_point(v in arb_json()) {
            let once = canonical_json(&v).unwrap();
            let reparsed: Value = serde_json::from_slice(&once).unwrap();
            prop_assert_eq!(canonical_json(&reparsed).unwrap(), once);
        }

        #[test]
        fn envelope_survives_frame_round_trip(v in arb_json(), body in proptest::collection::vec(any::<u8>(), 0..256)) {
            let id = fixed_identity();
            let env = sign_envelope(MessageKind::Tx, 9, json!({"tx": v}), &id).unwrap();
            let mut stream = frame(&env.to_json_bytes()).unwrap();
            stream.extend(frame(&body).unwrap());
            let mut cursor = io::Cursor::new(stream);
            let got = decode_envelope(&read_frame(&mut cursor).unwrap().unwrap()).unwrap();
            prop_assert!(verify_envelope(&got));
            prop_assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), body);
            prop_assert!(read_frame(&mut cursor).unwrap().is_none());
        }
    }
}
