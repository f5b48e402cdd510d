#pragma once

// Umbrella header for the class-activation-feature attack/defense toolkit.

#include "caf/attacks.hpp"
#include "caf/cafd_train.hpp"
#include "caf/cam.hpp"
#include "caf/classifier.hpp"
#include "caf/config.hpp"
#include "caf/dataset.hpp"
#include "caf/denoiser.hpp"
#include "caf/eval.hpp"
#include "caf/image_io.hpp"
