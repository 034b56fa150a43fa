//! Review-study orchestration for the four assistance conditions.

mod bank;
mod export;
mod service;
mod store;
mod types;

pub use bank::{
    build_case_bank, BankCase, CaseBank, CaseBankMeta, ASSETS, BANK_FILE, DRR_ASSET, HEATMAP_ASSET,
    XRAY_ASSET,
};
pub use export::{
    build_export, decisions_csv, summarize, summary_csv, survey_columns, surveys_csv,
    CategoryScore, ConditionSummary, Export, ExportFilter, DECISION_COLUMNS, SUMMARY_COLUMNS,
};
pub use service::{session_id_for, Clock, ManualClock, ReviewService, SystemClock};
pub use store::{Event, EventStore};
pub use types::*;
