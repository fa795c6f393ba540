//! Instruction templates and prompt layout.

use serde::{Deserialize, Serialize};

use super::{QueryPosition, TaskCategory, TaskGenError, TextBuilder};
use crate::context::CharInterval;

struct Template {
    instruction: &'static str,
    answer: &'static str,
}

const ANSWER_VALUE: &str = "Work it out first, then end your reply with one line in exactly this form:\nAnswer: <the value>";
const ANSWER_LIST: &str =
    "Work it out first, then end your reply with one line in exactly this form:\nAnswer: <comma-separated values>";
const ANSWER_CANDIDATE: &str = "End your reply with one line in exactly this form:\nAnswer: <the candidate>";
const ANSWER_CANDIDATES: &str = "End your reply with one line in exactly this form:\nAnswer: <comma-separated candidates>";

const KV: &[Template] = &[
    Template {
        instruction: "Look up the value stored under the given key in the data below.",
        answer: ANSWER_VALUE,
    },
    Template {
        instruction: "Below is a large dictionary of keys and values. Find the value stored under the requested key.",
        answer: ANSWER_VALUE,
    },
    Template {
        instruction: "You are given a lookup table. Each key is an integer and each value is a short code. \
                      Report the code for the key in question.",
        answer: ANSWER_VALUE,
    },
];

const REASONING: &[Template] = &[
    Template {
        instruction: "Solve the math problem to obtain an integer key, then extract the value stored under that key \
                      in the data below.",
        answer: ANSWER_VALUE,
    },
    Template {
        instruction: "The key you need is the solution of the equation given in the question. Look that key up in \
                      the dictionary below and report its value.",
        answer: ANSWER_VALUE,
    },
    Template {
        instruction: "First compute x. Then find the entry whose key equals x in the table below.",
        answer: ANSWER_VALUE,
    },
];

const NIAH: &[Template] = &[
    Template {
        instruction: "Some special magic values are hidden inside the following text. Memorize them; you will be \
                      asked about them.",
        answer: ANSWER_LIST,
    },
    Template {
        instruction: "Read the passage below. A few sentences state magic values for particular keys.",
        answer: ANSWER_LIST,
    },
];

const VOTES: &[Template] = &[
    Template {
        instruction: "Below is a record of individual votes. Count them carefully.",
        answer: ANSWER_CANDIDATE,
    },
    Template {
        instruction: "The following ballots were cast in an informal poll. Tally the results.",
        answer: ANSWER_CANDIDATE,
    },
];

const TOP_N: &[Template] = &[
    Template {
        instruction: "Below is a record of individual votes. Count them carefully.",
        answer: ANSWER_CANDIDATES,
    },
    Template {
        instruction: "The following ballots were cast in an informal poll. Tally the results.",
        answer: ANSWER_CANDIDATES,
    },
];

fn pool(category: TaskCategory) -> &'static [Template] {
    match category {
        TaskCategory::KvRetrieval => KV,
        TaskCategory::ReasoningRetrieval => REASONING,
        TaskCategory::MultiNiah => NIAH,
        TaskCategory::MajorityVote => VOTES,
        TaskCategory::TopNVote => TOP_N,
    }
}

pub fn template_count(category: TaskCategory) -> usize {
    pool(category).len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    /// Location of the body inside `text`.
    pub body: CharInterval,
    /// Every place the query was written.
    pub queries: Vec<CharInterval>,
}

/// Lays out instruction, body and query. Body-relative intervals map into
/// the prompt by shifting them by `body.start`.
pub fn assemble_prompt(
    category: TaskCategory,
    body: &str,
    template_id: usize,
    query: &str,
    position: QueryPosition,
) -> Result<AssembledPrompt, TaskGenError> {
    let templates = pool(category);
    let t = templates.get(template_id).ok_or(TaskGenError::UnknownTemplate {
        category,
        id: template_id,
        available: templates.len(),
    })?;
    let mut out = TextBuilder::default();
    let mut queries = Vec::new();
    out.push(t.instruction);
    out.push("\n\n");
    if matches!(position, QueryPosition::Before | QueryPosition::Both) {
        queries.push(out.push_marked(query));
        out.push("\n\n");
    }
    let body_iv = out.push_marked(body);
    out.push("\n\n");
    if matches!(position, QueryPosition::After | QueryPosition::Both) {
        queries.push(out.push_marked(query));
        out.push("\n\n");
    }
    out.push(t.answer);
    Ok(AssembledPrompt {
        text: out.finish(),
        body: body_iv,
        queries,
    })
}
