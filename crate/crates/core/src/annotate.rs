//! PHI annotation through a chat-completion transport.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::model::{parse_phi_dictionary_audited, NoteRecord, ParseMode, PhiDictionary, PhiParseError, Repair};
use crate::prompts::{build_task_prompt, ChatRequest};
use crate::transport::{ChatTransport, TransportError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub backoff_base: Duration,
    /// Re-ask when the reply cannot be parsed.
    pub parse_retry: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            parse_retry: true,
        }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `attempt + 1`: `base * 2^(attempt - 1)`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.backoff_base.saturating_mul(factor)
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Failure of a retried request whose reply is parsed into `E`-typed errors.
#[derive(Debug, Error)]
pub enum RetryError<E: std::error::Error + 'static> {
    #[error("transport failed after {attempts} attempt(s): {source}")]
    Transport { attempts: u32, source: TransportError },
    #[error("no usable reply after {attempts} attempt(s): {last_error}")]
    Exhausted {
        attempts: u32,
        last_reply: String,
        last_error: E,
    },
}

/// Sends `request`, retrying transient transport errors and, if the policy
/// allows, unparseable replies. Returns the parsed value and the number of
/// attempts used.
pub fn complete_with_retry<T, E, F>(
    transport: &dyn ChatTransport,
    request: &ChatRequest,
    retry: &RetryPolicy,
    parse: F,
) -> Result<(T, u32), RetryError<E>>
where
    E: std::error::Error + 'static,
    F: Fn(&str) -> Result<T, E>,
{
    let max = retry.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match transport.complete(request) {
            Ok(reply) => match parse(&reply) {
                Ok(v) => return Ok((v, attempt)),
                Err(e) => {
                    log::debug!("attempt {attempt}: unusable reply: {e}");
                    if !retry.parse_retry || attempt >= max {
                        return Err(RetryError::Exhausted {
                            attempts: attempt,
                            last_reply: reply,
                            last_error: e,
                        });
                    }
                }
            },
            Err(e) => {
                log::debug!("attempt {attempt}: {e}");
                if !e.is_retryable() || attempt >= max {
                    return Err(RetryError::Transport {
                        attempts: attempt,
                        source: e,
                    });
                }
            }
        }
        let wait = retry.backoff(attempt);
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub phi: PhiDictionary,
    pub repairs: Vec<Repair>,
    pub attempts: u32,
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("note `{0}` has empty text")]
    EmptyNote(String),
    #[error("transport error after {attempts} attempt(s): {source}")]
    Transport { attempts: u32, source: TransportError },
    #[error("no parseable PHI dictionary after {attempts} attempt(s): {last_error}")]
    ExhaustedRetries {
        attempts: u32,
        /// Raw text of the final reply, kept for audit.
        last_reply: String,
        last_error: PhiParseError,
    },
}

impl From<RetryError<PhiParseError>> for AnnotateError {
    fn from(e: RetryError<PhiParseError>) -> Self {
        match e {
            RetryError::Transport { attempts, source } => AnnotateError::Transport { attempts, source },
            RetryError::Exhausted {
                attempts,
                last_reply,
                last_error,
            } => AnnotateError::ExhaustedRetries {
                attempts,
                last_reply,
                last_error,
            },
        }
    }
}

/// Annotate one note with the task prompt; replies are parsed leniently and
/// every repair is logged.
pub fn annotate(
    note: &NoteRecord,
    transport: &dyn ChatTransport,
    retry: &RetryPolicy,
) -> Result<Annotation, AnnotateError> {
    if note.text.trim().is_empty() {
        return Err(AnnotateError::EmptyNote(note.id.clone()));
    }
    let request = build_task_prompt(&note.text);
    let (parsed, attempts) = complete_with_retry(transport, &request, retry, |reply| {
        parse_phi_dictionary_audited(reply, ParseMode::Lenient)
    })?;
    for r in &parsed.repairs {
        log::info!("note {}: {r}", note.id);
    }
    Ok(Annotation {
        phi: parsed.dictionary,
        repairs: parsed.repairs,
        attempts,
    })
}

#[derive(Debug)]
pub struct AnnotationOutcome {
    pub id: String,
    pub result: Result<Annotation, AnnotateError>,
}

/// Annotate every note with at most `parallelism` requests in flight.
/// Results are in input order and a failed note never aborts the batch.
pub fn annotate_corpus(
    notes: &[NoteRecord],
    transport: &dyn ChatTransport,
    retry: &RetryPolicy,
    parallelism: usize,
) -> Vec<AnnotationOutcome> {
    exec::bounded_map(notes.len(), parallelism, |i| AnnotationOutcome {
        id: notes[i].id.clone(),
        result: annotate(&notes[i], transport, retry),
    })
}
