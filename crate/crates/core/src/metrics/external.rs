//! Scorers computed by an external program.

use std::io::Write;
use std::process::{Command, Stdio};

use crate::error::{Error, Result};

pub trait ExternalScorer {
    fn name(&self) -> &str;
    fn score(&self, hyps: &[String], refs: &[String]) -> Result<f64>;
}

/// Pipes one `{"hyp": .., "ref": ..}` JSON object per line to the program's
/// stdin and reads a single number from its stdout.
pub struct CommandScorer {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalScorer for CommandScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, hyps: &[String], refs: &[String]) -> Result<f64> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            for (h, r) in hyps.iter().zip(refs) {
                let line = serde_json::json!({ "hyp": h, "ref": r });
                writeln!(stdin, "{line}")?;
            }
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(Error::config(format!("{} exited with {}", self.name, out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse()
            .map_err(|_| Error::config(format!("{} printed {:?}, not a number", self.name, text.trim())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_the_printed_score() {
        let s = CommandScorer {
            name: "lines".into(),
            program: "sh".into(),
            args: vec!["-c".into(), "wc -l | tr -d ' '".into()],
        };
        let v = s.score(&["a".into(), "b".into()], &["a".into(), "c".into()]).unwrap();
        assert_eq!(v, 2.0);
        let bad = CommandScorer {
            name: "bad".into(),
            program: "sh".into(),
            args: vec!["-c".into(), "echo nope".into()],
        };
        assert!(bad.score(&[], &[]).is_err());
    }
}
