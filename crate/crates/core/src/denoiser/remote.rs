//! Client for an external model server speaking `PTD1`.

use std::sync::Mutex;

use ndarray::Array3;

use super::{fresh_scope, ConditionHandle, ConditionKind, Denoiser};
use crate::codec::{Codec, Decoded, ImageTensor};
use crate::error::{Error, Result};
use crate::protocol::{Connection, Frame, Header, MessageType};
use crate::tensor::LatentTensor;

/// Condition id 0 is always the null-text embedding on the server.
const NULL_CONDITION: u64 = 0;

#[derive(Debug)]
pub struct RemoteDenoiser {
    conn: Mutex<Connection>,
    scope: u64,
    latent_shape: Vec<usize>,
}

impl RemoteDenoiser {
    /// Connects and performs the `HELLO` handshake.
    pub fn connect(addr: &str) -> Result<Self> {
        let mut conn = Connection::connect(addr)?;
        let reply =
            expect_result(conn.request(MessageType::Hello, Header::default(), Vec::new())?)?;
        let latent_shape = reply
            .header
            .shape
            .ok_or_else(|| Error::Backend("HELLO reply lacks a latent shape".into()))?;
        if let Some(dtype) = reply.header.dtype.as_deref() {
            if dtype != "f32" {
                return Err(Error::Backend(format!("unsupported dtype `{dtype}`")));
            }
        }
        Ok(Self {
            conn: Mutex::new(conn),
            scope: fresh_scope(),
            latent_shape,
        })
    }

    /// Latent shape advertised by the server.
    pub fn latent_shape(&self) -> &[usize] {
        &self.latent_shape
    }

    pub fn embed_text(&self, prompt: &str) -> Result<ConditionHandle> {
        let header = Header {
            text: Some(prompt.to_owned()),
            ..Header::default()
        };
        let reply = expect_result(self.call(MessageType::EmbedText, header, Vec::new())?)?;
        let id = reply
            .header
            .condition_id
            .ok_or_else(|| Error::Backend("EMBED_TEXT reply lacks a condition id".into()))?;
        let kind = if id == NULL_CONDITION {
            ConditionKind::NullText
        } else {
            ConditionKind::Prompt
        };
        Ok(ConditionHandle::new(self.scope, id, kind))
    }

    fn call(&self, kind: MessageType, header: Header, payload: Vec<f32>) -> Result<Frame> {
        self.conn
            .lock()
            .map_err(|_| Error::Backend("connection poisoned".into()))?
            .request(kind, header, payload)
    }
}

impl Drop for RemoteDenoiser {
    fn drop(&mut self) {
        if let Ok(conn) = self.conn.get_mut() {
            let _ = conn.bye();
        }
    }
}

fn expect_result(frame: Frame) -> Result<Frame> {
    match frame.kind {
        MessageType::Result => Ok(frame),
        MessageType::Error => {
            let code = frame.header.code.unwrap_or_default();
            let message = frame.header.message.unwrap_or_default();
            if code == "cond_unknown" {
                Err(Error::Condition(message))
            } else {
                Err(Error::Backend(format!("{code}: {message}")))
            }
        }
        other => Err(Error::Backend(format!("unexpected reply type {other:?}"))),
    }
}

fn to_payload(z: &Array3<f64>) -> (Vec<usize>, Vec<f32>) {
    (z.shape().to_vec(), z.iter().map(|&v| v as f32).collect())
}

fn from_payload(frame: &Frame) -> Result<Array3<f64>> {
    let shape = frame
        .header
        .shape
        .as_deref()
        .ok_or_else(|| Error::Backend("reply lacks a tensor shape".into()))?;
    let &[c, h, w] = shape else {
        return Err(Error::Backend(format!(
            "expected rank-3 reply, got {shape:?}"
        )));
    };
    let data = frame.payload.iter().map(|&v| v as f64).collect();
    Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| Error::Backend(format!("reply payload does not match shape: {e}")))
}

impl Denoiser for RemoteDenoiser {
    fn eps(&self, z: &LatentTensor, t: usize, cond: &ConditionHandle) -> Result<LatentTensor> {
        if cond.scope() != self.scope {
            return Err(Error::Condition(
                "condition handle was issued by a different backend".into(),
            ));
        }
        let (shape, payload) = to_payload(z);
        let header = Header {
            timestep: Some(t as u64),
            condition_id: Some(cond.id()),
            shape: Some(shape),
            ..Header::default()
        };
        let reply = expect_result(self.call(MessageType::Eps, header, payload)?)?;
        let eps = from_payload(&reply)?;
        if eps.dim() != z.dim() {
            return Err(Error::Backend(format!(
                "eps shape {:?} does not match latent {:?}",
                eps.dim(),
                z.dim()
            )));
        }
        if !eps.iter().all(|v| v.is_finite()) {
            return Err(Error::Backend("server returned non-finite eps".into()));
        }
        Ok(eps)
    }

    fn null_condition(&self) -> ConditionHandle {
        ConditionHandle::new(self.scope, NULL_CONDITION, ConditionKind::NullText)
    }
}

impl Codec for RemoteDenoiser {
    fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        let (shape, payload) = to_payload(x.pixels());
        let header = Header {
            shape: Some(shape),
            ..Header::default()
        };
        from_payload(&expect_result(self.call(
            MessageType::Encode,
            header,
            payload,
        )?)?)
    }

    fn decode(&self, z: &LatentTensor) -> Result<Decoded> {
        let (shape, payload) = to_payload(z);
        let header = Header {
            shape: Some(shape),
            ..Header::default()
        };
        let raw = from_payload(&expect_result(self.call(
            MessageType::Decode,
            header,
            payload,
        )?)?)?;
        let mut clamped = 0;
        let pixels = raw.mapv(|p| {
            if (0.0..=1.0).contains(&p) {
                p
            } else {
                clamped += 1;
                if p.is_nan() {
                    0.0
                } else {
                    p.clamp(0.0, 1.0)
                }
            }
        });
        Ok(Decoded {
            image: ImageTensor::new(pixels)?,
            clamped,
        })
    }
}
