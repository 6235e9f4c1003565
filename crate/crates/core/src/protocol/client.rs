use std::collections::BTreeSet;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};

use thiserror::Error;

use super::{decode, encode, Content, ErrorCode, PlatformService, Request, Response};
use crate::dp::check_epsilon;
use crate::error::Error;
use crate::fairness::{evaluate_audit, AuditSpec, FairnessReport, NoisyHistogram};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(#[from] io::Error),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("server error {code}: {message}")]
    Server {
        code: ErrorCode,
        message: String,
        remaining_budget: Option<f64>,
    },

    #[error(transparent)]
    Audit(#[from] Error),
}

/// Something that answers requests: a socket, or a service in the same process.
pub trait Transport {
    fn call(&mut self, request: &Request) -> Result<Response, ClientError>;
}

impl Transport for &PlatformService {
    fn call(&mut self, request: &Request) -> Result<Response, ClientError> {
        Ok(self.handle(request.clone()))
    }
}

pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    /// Sends a raw line and returns the raw reply line.
    pub fn exchange_line(&mut self, line: &str) -> io::Result<String> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "server closed the connection",
            ));
        }
        Ok(reply.trim_end().to_string())
    }
}

impl Transport for TcpTransport {
    fn call(&mut self, request: &Request) -> Result<Response, ClientError> {
        let reply = self.exchange_line(&encode(request))?;
        decode::<Response>(&reply).map_err(|e| ClientError::Protocol(format!("{e:?}")))
    }
}

/// Typed requests for one auditor.
pub struct AuditClient<T> {
    transport: T,
    auditor_id: String,
}

fn server_error(response: Response) -> ClientError {
    match response {
        Response::Error {
            code,
            message,
            remaining_budget,
        } => ClientError::Server {
            code,
            message,
            remaining_budget,
        },
        other => ClientError::Protocol(format!("unexpected response {other:?}")),
    }
}

impl<T: Transport> AuditClient<T> {
    pub fn new(transport: T, auditor_id: impl Into<String>) -> Self {
        AuditClient {
            transport,
            auditor_id: auditor_id.into(),
        }
    }

    pub fn auditor_id(&self) -> &str {
        &self.auditor_id
    }

    /// Returns `(accepted, matched)`.
    pub fn upload(&mut self, handle: &str, group: &str, user_ids: &[String]) -> Result<(u64, u64), ClientError> {
        let response = self.transport.call(&Request::UploadAudience {
            auditor_id: self.auditor_id.clone(),
            audience_handle: handle.into(),
            group: group.into(),
            user_ids: user_ids.to_vec(),
        })?;
        match response {
            Response::UploadAudienceOk {
                accepted,
                matched,
                audience_handle,
            } if audience_handle == handle => Ok((accepted, matched)),
            other => Err(server_error(other)),
        }
    }

    /// Requests one privatized release for an uploaded audience.
    pub fn query(&mut self, handle: &str, content: &Content, epsilon: f64) -> Result<QueryReply, ClientError> {
        check_epsilon(epsilon)?;
        let response = self.transport.call(&Request::QueryRelevance {
            auditor_id: self.auditor_id.clone(),
            audience_handle: handle.into(),
            content: content.clone(),
            epsilon,
        })?;
        match response {
            Response::QueryRelevanceOk {
                group,
                noisy_counts,
                n_declared,
                epsilon_spent,
                remaining_budget,
            } => Ok(QueryReply {
                group,
                noisy_counts,
                n_declared,
                epsilon_spent,
                remaining_budget,
            }),
            other => Err(server_error(other)),
        }
    }

    /// Returns `(total, spent, remaining)`.
    pub fn budget(&mut self) -> Result<(f64, f64, f64), ClientError> {
        match self.transport.call(&Request::Budget {
            auditor_id: self.auditor_id.clone(),
        })? {
            Response::BudgetOk {
                total,
                spent,
                remaining,
                ..
            } => Ok((total, spent, remaining)),
            other => Err(server_error(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryReply {
    pub group: String,
    pub noisy_counts: Vec<f64>,
    pub n_declared: u64,
    pub epsilon_spent: f64,
    pub remaining_budget: f64,
}

/// Qualified users of one group, as known to the auditor.
#[derive(Debug, Clone, PartialEq)]
pub struct AudienceUpload {
    pub group: String,
    pub user_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditOutcome {
    pub report: FairnessReport,
    pub histograms: Vec<NoisyHistogram>,
    pub remaining_budget: f64,
}

/// Uploads one audience per group under `<handle_prefix>/<group>`, queries each
/// at `spec.epsilon` and evaluates the released histograms locally.
pub fn run_audit<T: Transport>(
    client: &mut AuditClient<T>,
    spec: &AuditSpec,
    audiences: &[AudienceUpload],
    content: &Content,
    handle_prefix: &str,
) -> Result<AuditOutcome, ClientError> {
    spec.validate()?;
    check_epsilon(spec.epsilon)?;
    let wanted: BTreeSet<&str> = spec.attributes.iter().map(|a| a.label.as_str()).collect();
    let given: BTreeSet<&str> = audiences.iter().map(|a| a.group.as_str()).collect();
    if wanted != given || audiences.len() != spec.attributes.len() {
        return Err(Error::InvalidParameter(
            "exactly one audience per audited group is required".into(),
        )
        .into());
    }
    let mut handles = Vec::with_capacity(audiences.len());
    for audience in audiences {
        let handle = format!("{handle_prefix}/{}", audience.group);
        let (_, matched) = client.upload(&handle, &audience.group, &audience.user_ids)?;
        if matched == 0 {
            return Err(Error::ZeroQualifiedGroup {
                group: audience.group.clone(),
            }
            .into());
        }
        handles.push((handle, matched));
    }
    let mut histograms = Vec::with_capacity(audiences.len());
    let mut remaining_budget = f64::NAN;
    for (audience, (handle, matched)) in audiences.iter().zip(&handles) {
        let reply = client.query(handle, content, spec.epsilon)?;
        if reply.group != audience.group
            || reply.n_declared != *matched
            || reply.noisy_counts.len() != spec.domain.size()
        {
            return Err(ClientError::Protocol(format!(
                "release for `{}` does not match the uploaded audience",
                audience.group
            )));
        }
        let group = spec
            .attribute(&audience.group)
            .cloned()
            .expect("group checked against spec");
        remaining_budget = reply.remaining_budget;
        histograms.push(NoisyHistogram {
            group,
            noisy_counts: reply.noisy_counts,
            n_declared: *matched,
            epsilon_spent: reply.epsilon_spent,
        });
    }
    let report = evaluate_audit(spec, &histograms)?;
    Ok(AuditOutcome {
        report,
        histograms,
        remaining_budget,
    })
}

/// [`run_audit`] over TCP, using the content id as the handle prefix.
pub fn client_audit(
    addr: impl ToSocketAddrs,
    auditor_id: &str,
    spec: &AuditSpec,
    audiences: &[AudienceUpload],
    content: &Content,
) -> Result<AuditOutcome, ClientError> {
    check_epsilon(spec.epsilon)?;
    let mut client = AuditClient::new(TcpTransport::connect(addr)?, auditor_id);
    run_audit(&mut client, spec, audiences, content, &content.id)
}
