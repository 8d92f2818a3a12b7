//! Prompt templates. Every render is byte-stable for fixed inputs; nothing
//! in here escapes or rewrites user text.

use crate::metrics::{format_millis, format_span_millis};
use crate::types::{EvidenceChain, EvidenceSegment, QaSample, OPTION_LETTERS};
use crate::TimeSpan;

pub const EVIDENCE_TAG: &str = "Evidence:";

/// Per-segment narration request; the clip itself travels as an attachment.
pub fn narration(question: &str) -> String {
    format!(
        "Question: {question}\n\
         Please provide short and concise evidence from the video that can help answer the question. \
         The format should be as follows:\n\
         {EVIDENCE_TAG} your_evidence_here"
    )
}

/// `[start-end] evidence` with the window normalized to the video length.
pub fn normalized_line(seg: &EvidenceSegment, duration_s: f64) -> String {
    let span = TimeSpan {
        start: seg.span.start / duration_s,
        end: seg.span.end / duration_s,
    };
    format!("{} {}", format_span_millis(&span), seg.text)
}

/// Numbered, normalized transcript of a pool.
pub fn pool_transcript(segments: &[EvidenceSegment], duration_s: f64) -> String {
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i}. {}", normalized_line(s, duration_s)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Chain transcript in absolute seconds, one step per line.
pub fn chain_transcript(steps: &[EvidenceSegment]) -> String {
    steps
        .iter()
        .map(|s| format!("{} {}", format_span_millis(&s.span), s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn chain_context(chain: &EvidenceChain) -> String {
    chain_transcript(&chain.steps)
}

pub fn refinement(sample: &QaSample, segments: &[EvidenceSegment], max_steps: usize) -> String {
    let transcript = pool_transcript(segments, sample.video.duration_s);
    format!(
        "Use the following video transcript to gather a list of evidence to help answer the question \"{question}\". Options: {options}\n\
         \n\
         Transcript:\n\
         {transcript}\n\
         \n\
         Provide the evidence in the following json format that will help reach the answer in a step by step manner.\n\
         Format:\n\
         {{\n\
         \x20   \"evidence_chain\": [\n\
         \x20       {{\n\
         \x20           \"start_time\": float,\n\
         \x20           \"end_time\": float,\n\
         \x20           \"evidence\": str\n\
         \x20       }},\n\
         \x20       ...\n\
         \x20   ]\n\
         }}\n\
         \n\
         Limit your evidence chain to at most {max_steps} steps. Respond directly with the json. \
         Please return the evidence as a valid JSON object with proper formatting. \
         Ensure all strings are enclosed in double quotes (\") and no invalid syntax is used.",
        question = sample.question,
        options = sample.options_line(),
    )
}

pub fn chain_of_thought(sample: &QaSample, steps: &[EvidenceSegment]) -> String {
    let transcript = chain_transcript(steps);
    format!(
        "You're the assistant to seek the visual evidence chain from the video to answer the question \"{question}\" Options: {options}\n\
         \n\
         Visual Evidence Observed from Video:\n\
         {transcript}\n\
         \n\
         The total duration of the video is {duration} seconds. Each evidence is the narrated question-relevant information within the [t1-t2seconds] interval of the video.\n\
         \n\
         Please utilize both the timestamps of the evidence and the temporal hint in the question, and also focus on the objects/events in the evidence that strongly indicate the moment described in the question, and then think step-by-step using the most relevant evidence to derive your answer.\n\
         Please rewrite relevant evidence and its temporal span into a chain-of-thought reasoning based on the video. \
         Such as, as the question ask about \"what does the man do after he enters the room in the end of the video?\", \
         we find that both [t1-t2seconds] and [t3-t4seconds] intervals show the man entering the room, \
         since the question is asking end of the video, we look at the latter interval and find that he is picking up a cup after entering the room, thus the answer is xxx.\n\
         Please provide your step-by-step reasoning full_chain_of_thought and keep the [t1-t2seconds] when you describe the visual evidence. \
         You can merge [t1-t2seconds] and [t3-t4seconds] as [t1-t4seconds] when they're the same evidence information. \
         Based on your step-by-step reasoning, select the most appropriate option letter as your final_answer. \
         Please try to only include the evidence that is relevant and necessary for answering the question.\n\
         Format:\n\
         {{\n\
         \x20   \"full_chain_of_thought\": str,\n\
         \x20   \"final_answer\": str\n\
         }}\n\
         Respond directly with the JSON.",
        question = sample.question,
        options = sample.options_line(),
        duration = format_millis(sample.video.duration_s),
    )
}

/// Multiple-choice prompt whose next token is read for option likelihoods.
pub fn answer_scoring(question: &str, options: &[String], context: &str) -> String {
    let mut out = String::new();
    if !context.is_empty() {
        out.push_str("Evidence from the video:\n");
        out.push_str(context);
        out.push_str("\n\n");
    }
    out.push_str("Question: ");
    out.push_str(question);
    out.push_str("\nOptions:\n");
    for (letter, opt) in OPTION_LETTERS.iter().zip(options) {
        out.push_str(&format!("{letter}. {opt}\n"));
    }
    out.push_str("Answer with the option letter only.\nAnswer:");
    out
}

pub fn direct_multi_evidence(sample: &QaSample) -> String {
    format!(
        "{} {} Please provide detail sequence of information of each part of the video that help answering the question. \
         The format should be in the form of: [start_time2-end_time2] This clip 1 shows that xxx which indicate xxx. \
         [start_time2-end_time2] This clip 2 shows that xxx which indicate xxx...",
        sample.question,
        sample.options_line()
    )
}

pub fn gt_guided(sample: &QaSample) -> String {
    format!(
        "{} {} Please provide your evidence chain in order in the video that help answering the question.",
        sample.question,
        sample.options_line()
    )
}
