//! Emulated legacy web server: GET handling with configurable URL-reflection
//! behavior, unconditional TCP timestamp echo, and optional close-after-
//! response (the worst-case handshake).
//!
//! The origin never parses Opsec messages. Its response is a pure function of
//! (profile, path, timestamps) — the protocol works with zero server-side
//! support precisely because reflecting a requested URL in a redirect
//! `Location` or an error body is ordinary server behavior.

use std::collections::BTreeMap;

use rand::Rng;

/// How this server reflects a requested URL it does not serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionMode {
    /// 301 redirect with the path echoed in `Location`.
    RedirectReflect,
    /// 404 with the path echoed in the error body.
    ErrorReflect,
    /// 404 without any echo; Opsec degrades per the client's fail mode.
    NoReflect,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OriginError {
    #[error("reflection mix weights sum to {0}, not 1")]
    BadDistribution(f64),
}

/// Weights for drawing a [`ReflectionMode`]. Must sum to 1 ± 1e-9.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReflectionMix {
    pub redirect: f64,
    pub error: f64,
    pub none: f64,
}

impl ReflectionMix {
    /// The measured web behavior: 63.40% redirect-style, 29.40% error-style,
    /// 6.34% non-standard (taken as no echo), renormalized to sum to 1.
    pub fn measured_default() -> Self {
        let (r, e, n) = (0.634, 0.294, 0.0634);
        let total = r + e + n;
        Self { redirect: r / total, error: e / total, none: n / total }
    }

    pub fn validate(&self) -> Result<(), OriginError> {
        let sum = self.redirect + self.error + self.none;
        if (sum - 1.0).abs() > 1e-9 || self.redirect < 0.0 || self.error < 0.0 || self.none < 0.0 {
            return Err(OriginError::BadDistribution(sum));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<ReflectionMode, OriginError> {
        self.validate()?;
        let x: f64 = rng.random();
        Ok(if x < self.redirect {
            ReflectionMode::RedirectReflect
        } else if x < self.redirect + self.error {
            ReflectionMode::ErrorReflect
        } else {
            ReflectionMode::NoReflect
        })
    }
}

/// One emulated server's behavior.
#[derive(Debug, Clone)]
pub struct ServerProfile {
    pub reflection_mode: ReflectionMode,
    pub close_after_response: bool,
    pub listen_port: u16,
    pub host: String,
    /// Real resources: path → body.
    pub content: BTreeMap<String, String>,
    /// When set, application records to/from this origin are sealed under the
    /// session content key (TLS stand-in); handled by the simulator.
    pub tls_like: bool,
}

impl ServerProfile {
    pub fn new(reflection_mode: ReflectionMode) -> Self {
        Self {
            reflection_mode,
            close_after_response: false,
            listen_port: 443,
            host: "server.example".to_string(),
            content: BTreeMap::new(),
            tls_like: false,
        }
    }
}

/// Draws a profile whose reflection mode follows the mix; other fields take
/// the defaults of [`ServerProfile::new`].
pub fn sample_profile(mix: &ReflectionMix, rng: &mut impl Rng) -> Result<ServerProfile, OriginError> {
    Ok(ServerProfile::new(mix.sample(rng)?))
}

/// Minimal response model: only the reflection-relevant surface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub location: Option<String>,
    pub body: String,
    pub ts_ecr: u32,
    /// Connection closes after this response.
    pub closes: bool,
}

impl HttpResponse {
    /// All reflected text a downstream reader could scan.
    pub fn reflected_text(&self) -> String {
        match &self.location {
            Some(l) => format!("{l}\n{}", self.body),
            None => self.body.clone(),
        }
    }
}

/// Handles one GET. The request arrives on the listening port (the port
/// re-arrangement guarantees that); `ts_val` is echoed into `ts_ecr`
/// bit-exactly, unconditionally.
pub fn handle_get(profile: &ServerProfile, path: &str, ts_val: u32) -> HttpResponse {
    let closes = profile.close_after_response;
    if let Some(body) = profile.content.get(path) {
        return HttpResponse { status: 200, location: None, body: body.clone(), ts_ecr: ts_val, closes };
    }
    match profile.reflection_mode {
        ReflectionMode::RedirectReflect => HttpResponse {
            status: 301,
            location: Some(format!("https://{}{}", profile.host, path)),
            body: String::new(),
            ts_ecr: ts_val,
            closes,
        },
        ReflectionMode::ErrorReflect => HttpResponse {
            status: 404,
            location: None,
            body: format!(
                "<html><body>404 Not Found: The requested URL {path} was not found on this server.</body></html>"
            ),
            ts_ecr: ts_val,
            closes,
        },
        ReflectionMode::NoReflect => HttpResponse {
            status: 404,
            location: None,
            body: "<html><body>404 Not Found</body></html>".to_string(),
            ts_ecr: ts_val,
            closes,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{embed_in_path, extract_from_path, MessageType, OpsecMessage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn redirect_reflects_path_verbatim() {
        let profile = ServerProfile::new(ReflectionMode::RedirectReflect);
        let msgs = vec![OpsecMessage::new(MessageType::OpsecHello, 0, vec![1, 2, 3])];
        let path = embed_in_path(&msgs).unwrap();
        let resp = handle_get(&profile, &path, 777);
        assert_eq!(resp.status, 301);
        assert!(resp.location.as_deref().unwrap().contains(&path));
        assert_eq!(extract_from_path(&resp.reflected_text()), msgs);
        assert_eq!(resp.ts_ecr, 777);
    }

    #[test]
    fn error_reflects_path_in_body() {
        let profile = ServerProfile::new(ReflectionMode::ErrorReflect);
        let msgs = vec![OpsecMessage::new(MessageType::ServDisc, 0, vec![9])];
        let path = embed_in_path(&msgs).unwrap();
        let resp = handle_get(&profile, &path, 1);
        assert_eq!(resp.status, 404);
        assert!(resp.body.contains(&path));
        assert_eq!(extract_from_path(&resp.reflected_text()), msgs);
    }

    #[test]
    fn no_reflect_drops_the_echo() {
        let profile = ServerProfile::new(ReflectionMode::NoReflect);
        let path = embed_in_path(&[OpsecMessage::new(MessageType::OpsecHello, 0, vec![])]).unwrap();
        let resp = handle_get(&profile, &path, 5);
        assert!(extract_from_path(&resp.reflected_text()).is_empty());
        assert_eq!(resp.ts_ecr, 5);
    }

    #[test]
    fn real_content_is_served() {
        let mut profile = ServerProfile::new(ReflectionMode::RedirectReflect);
        profile.content.insert("/index.html".into(), "welcome".into());
        let resp = handle_get(&profile, "/index.html", 2);
        assert_eq!((resp.status, resp.body.as_str()), (200, "welcome"));
    }

    #[test]
    fn close_after_response_flag_propagates() {
        let mut profile = ServerProfile::new(ReflectionMode::RedirectReflect);
        profile.close_after_response = true;
        assert!(handle_get(&profile, "/x", 0).closes);
    }

    #[test]
    fn mix_validation() {
        assert!(ReflectionMix { redirect: 0.5, error: 0.4, none: 0.1 }.validate().is_ok());
        assert_eq!(
            ReflectionMix { redirect: 0.5, error: 0.4, none: 0.0 }.validate(),
            Err(OriginError::BadDistribution(0.9))
        );
        ReflectionMix::measured_default().validate().unwrap();
    }

    #[test]
    fn degenerate_mix_always_redirects() {
        let mix = ReflectionMix { redirect: 1.0, error: 0.0, none: 0.0 };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(mix.sample(&mut rng).unwrap(), ReflectionMode::RedirectReflect);
        }
    }

    #[test]
    fn measured_mix_frequencies_within_one_percent() {
        let mix = ReflectionMix::measured_default();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match mix.sample(&mut rng).unwrap() {
                ReflectionMode::RedirectReflect => counts[0] += 1,
                ReflectionMode::ErrorReflect => counts[1] += 1,
                ReflectionMode::NoReflect => counts[2] += 1,
            }
        }
        let freq = |c: usize| c as f64 / n as f64;
        assert!((freq(counts[0]) - mix.redirect).abs() < 0.01);
        assert!((freq(counts[1]) - mix.error).abs() < 0.01);
        assert!((freq(counts[2]) - mix.none).abs() < 0.01);
    }
}
