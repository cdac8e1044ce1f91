//! Thin async client for the labeling service.

use rarequery_core::protocol::{
    BatchResponse, CreateSessionRequest, CreateSessionResponse, ErrorBody, LabelSubmission,
    ResultsResponse, SessionStatus, TileLabel,
};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {}", body.error)]
    Api { status: u16, body: ErrorBody },
    #[error("server returned {status}: {text}")]
    Unexpected { status: u16, text: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } | ClientError::Unexpected { status, .. } => {
                Some(*status)
            }
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<(u16, T)> {
    let status = resp.status().as_u16();
    if resp.status().is_success() {
        return Ok((status, resp.json().await?));
    }
    let text = resp.text().await?;
    match serde_json::from_str::<ErrorBody>(&text) {
        Ok(body) => Err(ClientError::Api { status, body }),
        Err(_) => Err(ClientError::Unexpected { status, text }),
    }
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn health(&self) -> Result<()> {
        decode::<serde_json::Value>(self.http.get(self.url("/health")).send().await?)
            .await
            .map(|_| ())
    }

    /// Creates a session; the flag is `false` when an idempotency key matched
    /// an existing one.
    pub async fn create_session(
        &self,
        req: &CreateSessionRequest,
    ) -> Result<(CreateSessionResponse, bool)> {
        let (status, body) = decode(
            self.http
                .post(self.url("/sessions"))
                .json(req)
                .send()
                .await?,
        )
        .await?;
        Ok((body, status == 201))
    }

    pub async fn status(&self, id: &str) -> Result<SessionStatus> {
        Ok(decode(
            self.http
                .get(self.url(&format!("/sessions/{id}")))
                .send()
                .await?,
        )
        .await?
        .1)
    }

    pub async fn sessions(&self) -> Result<Vec<SessionStatus>> {
        #[derive(serde::Deserialize)]
        struct Listing {
            sessions: Vec<SessionStatus>,
        }
        let (_, listing): (_, Listing) =
            decode(self.http.get(self.url("/sessions")).send().await?).await?;
        Ok(listing.sessions)
    }

    pub async fn batch(&self, id: &str) -> Result<BatchResponse> {
        Ok(decode(
            self.http
                .get(self.url(&format!("/sessions/{id}/batch")))
                .send()
                .await?,
        )
        .await?
        .1)
    }

    pub async fn submit(&self, id: &str, labels: &[(usize, bool)]) -> Result<SessionStatus> {
        let body = LabelSubmission {
            labels: labels
                .iter()
                .map(|&(tile_id, y)| TileLabel {
                    tile_id,
                    label: if y { "positive" } else { "negative" }.to_string(),
                })
                .collect(),
        };
        self.submit_raw(id, &body).await
    }

    pub async fn submit_raw(&self, id: &str, body: &LabelSubmission) -> Result<SessionStatus> {
        let url = self.url(&format!("/sessions/{id}/labels"));
        Ok(decode(self.http.post(url).json(body).send().await?)
            .await?
            .1)
    }

    pub async fn results(&self, id: &str) -> Result<ResultsResponse> {
        Ok(decode(
            self.http
                .get(self.url(&format!("/sessions/{id}/results")))
                .send()
                .await?,
        )
        .await?
        .1)
    }
}
