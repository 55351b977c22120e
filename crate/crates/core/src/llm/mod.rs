//! Prompt templates, the chat-completions client, answer extraction and
//! LLM-output voting.

mod client;
mod extract;
mod ops;
mod template;

pub use client::{ChatMessage, ChatModel, HttpChatClient, LlmClientConfig, Role};
pub use extract::{
    agreement_vote, extract_binary_answer, extract_binary_answer_with, extract_paragraph_ids,
    majority_vote_answers, Answer, AnswerPatterns, BinaryAnswer, ExtractedIds, ExtractionRule, Pattern,
};
pub use ops::{
    compose_messages, entail_select, render_paragraph_list, select_fewshot_examples, summarize_case,
    EntailSelection, FewShotExample, PoolItem, PromptInput,
};
pub use template::{PromptTemplate, DEFAULT_SYSTEM_PROMPT, DEFAULT_YESNO_INSTRUCTION};
