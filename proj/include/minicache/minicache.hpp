// Copyright (C) 2026 The MiniCache Engine Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "minicache/error.hpp"
#include "minicache/tensor.hpp"
#include "minicache/merge.hpp"
#include "minicache/retention.hpp"
#include "minicache/quantizer.hpp"
#include "minicache/cache_engine.hpp"
#include "minicache/sim_decoder.hpp"
#include "minicache/memory_model.hpp"
#include "minicache/io.hpp"
#include "minicache/run_config.hpp"
