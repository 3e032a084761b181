//! Teleoperation gateway: streams the simulator at the control rate,
//! applies operator commands and commits finished episodes as `.hdse`
//! files.

pub mod protocol;
pub mod server;
pub mod session;
pub mod transport;

pub use protocol::{ClientMessage, Cmd, GripCmd, ServerMessage, StateMsg, PROTO};
pub use server::Server;
pub use session::{Session, SessionConfig};
