//! MAML meta-learning lab: a symbolic reverse-mode autodiff engine with
//! double backward, small MLP classifiers over a flat parameter vector,
//! a synthetic few-shot task distribution, MAML / first-order MAML / a
//! trajectory-coherence regularized variant / a finetuning baseline, and
//! landscape metrics measured around meta-test adaptation.

pub mod autodiff;
pub mod landscape;
pub mod meta;
pub mod model;
pub mod par;
pub mod runner;
pub mod tasks;
