//! Core value types: the columnar dataset, range queries and their vector
//! form, aggregate specs, and the exact executor used as ground truth.

mod exec;
mod query;
mod table;

pub use exec::{execute_exact, select_rows};
pub use query::{
    query_distance, squared_distance, vectorize, AggFn, AggregateSpec, QueryAnswerPair, QueryVector, RangeQuery,
};
pub use table::{Bounds, DataTable};
