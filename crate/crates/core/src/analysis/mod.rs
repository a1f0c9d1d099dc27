//! Measurements over trained models: attention entropy, attention-derived
//! word alignment and AER, corpus BLEU, embedding probes.

mod alignment;
mod bleu;
mod embeddings;
mod entropy;

pub use alignment::{
    aer, corpus_aer, extract_alignment, links_from_matrix, merge_subword_attention, read_gold_alignments, AerCounts, AlignmentLinks,
    GoldAlignment,
};
pub use bleu::{corpus_bleu, BleuStats};
pub use embeddings::{nearest_neighbors, transplant_embeddings, Neighbor, DEFAULT_NEIGHBORS};
pub use entropy::{attention_entropy, corpus_entropy, row_entropy, EntropyProfile};
