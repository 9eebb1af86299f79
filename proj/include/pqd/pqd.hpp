// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "pqd/calibration.hpp"
#include "pqd/common.hpp"
#include "pqd/config.hpp"
#include "pqd/denoiser.hpp"
#include "pqd/diffusion.hpp"
#include "pqd/io.hpp"
#include "pqd/metrics.hpp"
#include "pqd/pipeline.hpp"
#include "pqd/quantizer.hpp"
#include "pqd/toy_data.hpp"
