use std::collections::BTreeMap;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::Outcome;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedReport {
    pub outcomes: BTreeMap<String, Outcome>,
    pub messages: BTreeMap<String, String>,
    /// Set when the stream could not be fully understood.
    pub problem: Option<String>,
}

impl ParsedReport {
    fn record(&mut self, id: String, outcome: Outcome, message: Option<String>) {
        if self.outcomes.contains_key(&id) {
            self.problem
                .get_or_insert_with(|| format!("duplicate test id `{id}`"));
            return;
        }
        if let Some(m) = message.filter(|m| !m.trim().is_empty()) {
            self.messages.insert(id.clone(), m);
        }
        self.outcomes.insert(id, outcome);
    }
}

/// `<id> <status> [message]` per line. Blank lines and `#` comments are
/// ignored; anything else that does not fit is a problem.
pub fn parse_line_protocol(text: &str) -> ParsedReport {
    let mut report = ParsedReport::default();
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.splitn(3, char::is_whitespace);
        let id = parts.next().unwrap_or_default();
        let status = parts.next().and_then(Outcome::parse);
        match status {
            Some(outcome) => {
                let message = parts.next().map(|m| m.trim().to_string());
                report.record(id.to_string(), outcome, message);
            }
            None => {
                report
                    .problem
                    .get_or_insert_with(|| format!("line {}: cannot parse `{trimmed}`", n + 1));
            }
        }
    }
    report
}

fn attr(e: &BytesStart, name: &str) -> Option<String> {
    e.try_get_attribute(name)
        .ok()
        .flatten()
        .and_then(|a| a.unescape_value().ok().map(|v| v.into_owned()))
}

fn case_id(e: &BytesStart) -> String {
    let name = attr(e, "name").unwrap_or_default();
    match attr(e, "classname").filter(|c| !c.is_empty()) {
        Some(class) => format!("{class}::{name}"),
        None => name,
    }
}

struct OpenCase {
    id: String,
    outcome: Outcome,
    message: String,
    in_detail: bool,
}

/// JUnit-style XML. Test ids are `classname::name`.
pub fn parse_junit(xml: &str) -> ParsedReport {
    let mut report = ParsedReport::default();
    let mut reader = Reader::from_str(xml);
    let mut open: Option<OpenCase> = None;
    let mut seen_root = false;
    loop {
        let event = match reader.read_event() {
            Ok(e) => e,
            Err(e) => {
                report.problem = Some(format!(
                    "XML error at byte {}: {e}",
                    reader.buffer_position()
                ));
                break;
            }
        };
        let opened = match &event {
            Event::Start(e) => Some((e.clone(), false)),
            Event::Empty(e) => Some((e.clone(), true)),
            _ => None,
        };
        if let Some((e, empty)) = opened {
            let local = e.local_name();
            match local.as_ref() {
                b"testsuite" | b"testsuites" => seen_root = true,
                b"testcase" => {
                    seen_root = true;
                    let id = case_id(&e);
                    if empty {
                        report.record(id, Outcome::Pass, None);
                    } else {
                        open = Some(OpenCase {
                            id,
                            outcome: Outcome::Pass,
                            message: String::new(),
                            in_detail: false,
                        });
                    }
                }
                tag => {
                    let outcome = match tag {
                        b"failure" => Some(Outcome::Fail),
                        b"error" => Some(Outcome::Error),
                        b"skipped" => Some(Outcome::Skip),
                        _ => None,
                    };
                    if let (Some(case), Some(o)) = (open.as_mut(), outcome) {
                        if !case.outcome.is_failing() {
                            case.outcome = o;
                        }
                        if let Some(m) = attr(&e, "message") {
                            case.message.push_str(&m);
                            case.message.push('\n');
                        }
                        case.in_detail = !empty;
                    }
                }
            }
            continue;
        }
        match event {
            Event::Text(t) => {
                if let Some(case) = open.as_mut().filter(|c| c.in_detail) {
                    if let Ok(text) = t.xml_content() {
                        case.message.push_str(&text);
                    }
                }
            }
            Event::CData(t) => {
                if let Some(case) = open.as_mut().filter(|c| c.in_detail) {
                    case.message.push_str(&String::from_utf8_lossy(&t));
                }
            }
            Event::GeneralRef(r) => {
                if let Some(case) = open.as_mut().filter(|c| c.in_detail) {
                    let name = String::from_utf8_lossy(&r).to_string();
                    if let Some(ch) = quick_xml::escape::resolve_predefined_entity(&name) {
                        case.message.push_str(ch);
                    }
                }
            }
            Event::End(e) => match e.local_name().as_ref() {
                b"testcase" => {
                    if let Some(case) = open.take() {
                        let message = Some(case.message.trim().to_string());
                        report.record(case.id, case.outcome, message);
                    }
                }
                b"failure" | b"error" | b"skipped" => {
                    if let Some(case) = open.as_mut() {
                        case.in_detail = false;
                    }
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
    }
    if open.is_some() {
        report
            .problem
            .get_or_insert_with(|| "unterminated testcase".into());
    }
    if !seen_root && !xml.trim().is_empty() && report.problem.is_none() {
        report.problem = Some("no testsuite element found".into());
    }
    report
}
