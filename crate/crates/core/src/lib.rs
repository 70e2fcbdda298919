pub mod cli;
pub mod corpus;
pub mod eval;
pub mod llm;
pub mod mask;
pub mod paraphrase;
pub mod prompt;
pub mod tagfmt;
pub mod validate;
