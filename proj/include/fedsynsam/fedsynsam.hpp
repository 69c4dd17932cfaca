// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "fedsynsam/autodiff.hpp"
#include "fedsynsam/compress.hpp"
#include "fedsynsam/config.hpp"
#include "fedsynsam/data.hpp"
#include "fedsynsam/distill.hpp"
#include "fedsynsam/errors.hpp"
#include "fedsynsam/experiment.hpp"
#include "fedsynsam/fed.hpp"
#include "fedsynsam/io.hpp"
#include "fedsynsam/metrics.hpp"
#include "fedsynsam/model.hpp"
#include "fedsynsam/rng.hpp"
#include "fedsynsam/sam.hpp"
#include "fedsynsam/tensor.hpp"
#include "fedsynsam/version.hpp"
#include "fedsynsam/weights.hpp"
