#pragma once

#include <string>

#include "priorfuse/core/image.hpp"

namespace priorfuse::prior {

inline std::string render_prompt(DegradationType degradation) {
  return "Please remove the " + std::string(display_name(degradation)) +
         " from the image. The processed image should remain aligned with the input image.";
}

}  // namespace priorfuse::prior
