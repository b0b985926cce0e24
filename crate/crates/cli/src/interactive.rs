//! The terminal loop behind `pooltest session`.

use std::io::{BufRead, Write};

use pooltest::{Session, TestResult};

use crate::{CliError, CliResult};

/// Prompts for each recommended pool and reads one result per line (`+`,
/// `-`, `positive`, `negative`). Blank lines are skipped and unreadable
/// answers re-prompt. With `json` every state is printed as one JSON line.
pub fn run(mut session: Session, input: &mut impl BufRead, out: &mut impl Write, json: bool) -> CliResult {
    let n = session.n();
    let mut line = String::new();
    loop {
        if json {
            serde_json::to_writer(&mut *out, &session.snapshot()).map_err(pooltest::Error::from)?;
            writeln!(out)?;
        }
        let Some(pool) = session.next_pool() else { break };
        if !json {
            writeln!(
                out,
                "test {pool}  (test {}, status {}, expected remaining {:.3})",
                session.tests_used() + 1,
                session.known(),
                session.expected_remaining()?
            )?;
            write!(out, "result [+/-]: ")?;
        }
        out.flush()?;
        let result = loop {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(CliError::Other(format!(
                    "input ended after {} tests, before the session completed",
                    session.tests_used()
                )));
            }
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            match text.parse::<TestResult>() {
                Ok(r) => break r,
                Err(_) if !json => write!(out, "answer + or -: ")?,
                Err(e) => return Err(e.into()),
            }
            out.flush()?;
        };
        if !json {
            writeln!(out, "{}", if result.is_positive() { "positive" } else { "negative" })?;
        }
        session.record_result(result)?;
    }
    if !json {
        let outcome = session.outcome().expect("loop ends on completion");
        let infected: Vec<String> = (1..=n).filter(|&i| outcome.is_infected(i)).map(|i| i.to_string()).collect();
        writeln!(out, "done: outcome {}", outcome.to_bit_string())?;
        if infected.is_empty() {
            writeln!(out, "all samples clean")?;
        } else {
            writeln!(out, "infected samples: {}", infected.join(", "))?;
        }
        writeln!(out, "{} tests used (naive: {n})", session.tests_used())?;
    }
    Ok(())
}
