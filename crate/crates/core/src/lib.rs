pub mod constitutive;
pub mod app;
pub mod coupler;
pub mod elements;
pub mod forms;
pub mod linsolve;
pub mod mesh;
pub mod mms;
pub mod quadrature;
pub mod spaces;
pub mod vtk;
