#pragma once

#include "error.hpp"
#include "log.hpp"
#include "rng.hpp"
#include "core_model.hpp"
#include "numerics.hpp"
#include "clustering.hpp"
#include "discovery.hpp"
#include "retention.hpp"
#include "evaluation.hpp"
#include "data_io.hpp"
#include "report.hpp"
#include "pipeline.hpp"
#include "config.hpp"
