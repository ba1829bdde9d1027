// Copyright (c) 2026 The layerlens Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "layerlens/aam.hpp"
#include "layerlens/actvstore.hpp"
#include "layerlens/cka.hpp"
#include "layerlens/dino.hpp"
#include "layerlens/probe.hpp"
#include "layerlens/report.hpp"
#include "layerlens/toy_encoder.hpp"
#include "layerlens/types.hpp"
