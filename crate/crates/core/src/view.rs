use crate::camera::Camera;
use crate::image::Image;

/// One supervision image and the camera that took it.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}
